//! Exact-arithmetic reference semantics of an integer plan.
//!
//! Every value is an `i128` and every dyadic multiply is evaluated as the
//! rational `eta * c / 2^d` rounded half up, with no shifts and no overflow
//! checks. Any disagreement with [`super::exec_plan`] on a valid plan is a bug
//! in one of the two.

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::lowering::{analyze, per_level, DyadicRational, IntegerPlan, OpKind};

use super::IntTensor;

/// `(N, C, H, W)` tensor of exact integers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefTensor {
    pub shape: [usize; 4],
    pub data: Vec<i128>,
}

impl RefTensor {
    fn channel_of(&self, i: usize) -> usize {
        (i / (self.shape[2] * self.shape[3])) % self.shape[1]
    }

    pub fn matches(&self, t: &IntTensor) -> bool {
        self.shape == t.shape && self.data.iter().zip(&t.data).all(|(a, b)| *a == *b as i128)
    }
}

fn round_half_up(eta: i128, m: &DyadicRational) -> i128 {
    let r = Ratio::new(eta * m.c as i128, 1i128 << m.d) + Ratio::new(1, 2);
    r.floor().to_integer()
}

fn conv(x: &RefTensor, w: &[i32], in_c: usize, out_c: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> RefTensor {
    let [n, _, h, wd] = x.shape;
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut data = Vec::with_capacity(n * out_c * oh * ow);
    let at = |b: usize, c: usize, y: isize, xx: isize| -> i128 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0
        } else {
            x.data[((b * in_c + c) * h + y as usize) * wd + xx as usize]
        }
    };
    for b in 0..n {
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i128;
                    for c in 0..in_c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                acc += at(b, c, y, xx) * w[((o * in_c + c) * kh + ky) * kw + kx] as i128;
                            }
                        }
                    }
                    data.push(acc);
                }
            }
        }
    }
    RefTensor {
        shape: [n, out_c, oh, ow],
        data,
    }
}

fn pool(x: &RefTensor, kernel: Option<usize>) -> RefTensor {
    let [n, c, h, w] = x.shape;
    let (kh, kw) = kernel.map_or((h, w), |k| (k, k));
    let (oh, ow) = (h / kh, w / kw);
    let mut data = Vec::with_capacity(n * c * oh * ow);
    for bc in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let m = (0..kh * kw)
                    .map(|t| x.data[bc * h * w + (oy * kh + t / kw) * w + ox * kw + t % kw])
                    .max()
                    .expect("non-empty window");
                data.push(m);
            }
        }
    }
    RefTensor {
        shape: [n, c, oh, ow],
        data,
    }
}

fn upsample(x: &RefTensor) -> RefTensor {
    let [n, c, h, w] = x.shape;
    let mut data = Vec::with_capacity(4 * x.data.len());
    for bc in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                data.push(x.data[(bc * h + y / 2) * w + xx / 2]);
            }
        }
    }
    RefTensor {
        shape: [n, c, 2 * h, 2 * w],
        data,
    }
}

/// Every slot of `p` on `input` under exact arithmetic. Dequantization
/// slots hold the integers they scale.
pub fn simulate_exact(p: &IntegerPlan, input: &IntTensor) -> Result<Vec<Vec<RefTensor>>> {
    let (info, _, issues) = analyze(p);
    if info.iter().any(Option::is_none) || p.levels == 0 {
        let msg = issues.first().map_or("unanalyzable plan".into(), |i| format!("op {:?} ({}): {}", i.op, i.name, i.msg));
        return Err(Error::InvalidPlan(msg));
    }
    if input.shape[1..] != p.input_shape {
        return Err(Error::Shape(format!("input {:?} does not match plan input {:?}", input.shape, p.input_shape)));
    }
    let mut slots = vec![vec![RefTensor {
        shape: input.shape,
        data: input.data.iter().map(|&v| v as i128).collect(),
    }]];
    for op in &p.ops {
        let x = &slots[op.inputs[0]];
        let map = |f: &dyn Fn(usize, &RefTensor) -> RefTensor| -> Vec<RefTensor> {
            x.iter().enumerate().map(|(l, t)| f(l, t)).collect()
        };
        let out = match &op.kind {
            OpKind::IntConv {
                in_c,
                out_c,
                kh,
                kw,
                stride,
                pad,
                weights,
                ..
            } => map(&|_, t| conv(t, weights, *in_c, *out_c, *kh, *kw, *stride, *pad)),
            OpKind::BnOffsetAdd { offsets, .. } => map(&|l, t| {
                let row = per_level(offsets, l);
                RefTensor {
                    shape: t.shape,
                    data: t.data.iter().enumerate().map(|(i, v)| v + row[t.channel_of(i)] as i128).collect(),
                }
            }),
            OpKind::Requant { mult, lo, hi, .. } => map(&|l, t| {
                let row = per_level(mult, l);
                RefTensor {
                    shape: t.shape,
                    data: t
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, v)| round_half_up(*v, &row[t.channel_of(i)]).clamp(*lo as i128, *hi as i128))
                        .collect(),
                }
            }),
            OpKind::DyadicSkipAdd { channels, .. } => {
                let y = &slots[op.inputs[1]];
                x.iter()
                    .zip(y)
                    .enumerate()
                    .map(|(l, (a, b))| {
                        let row = per_level(channels, l);
                        RefTensor {
                            shape: a.shape,
                            data: (0..a.data.len())
                                .map(|i| {
                                    let ch = &row[a.channel_of(i)];
                                    let (s, u) = if ch.scaled == 0 { (a.data[i], b.data[i]) } else { (b.data[i], a.data[i]) };
                                    round_half_up(s, &ch.mult) + u
                                })
                                .collect(),
                        }
                    })
                    .collect()
            }
            OpKind::IntMaxPool { kernel } => map(&|_, t| pool(t, *kernel)),
            OpKind::IntUpsample => map(&|_, t| upsample(t)),
            OpKind::PyramidGather => op.inputs.iter().map(|&s| slots[s][0].clone()).collect(),
            OpKind::Dequant { .. } => x.clone(),
        };
        slots.push(out);
    }
    Ok(slots)
}
