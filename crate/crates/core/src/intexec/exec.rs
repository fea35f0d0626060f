use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::census::{Census, Prim};
use crate::error::{Error, Result};
use crate::lowering::{per_level, validate_plan, DyadicRational, IntegerPlan, OpKind, SkipChannel};
use crate::quantcore::quantize_activation;
use crate::traingraph::Tensor;

/// Dense `(N, C, H, W)` integer tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntTensor {
    pub shape: [usize; 4],
    pub data: Vec<i32>,
}

/// One integer tensor per pyramid level.
pub type IntValue = Vec<IntTensor>;

impl IntTensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<i32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn channel_of(&self, i: usize) -> usize {
        (i / self.plane()) % self.shape[1]
    }
}

/// Quantizes real inputs onto the plan's 8-bit input grid.
pub fn quantize_input(p: &IntegerPlan, x: &Tensor) -> Result<IntTensor> {
    let [c, h, w] = p.input_shape;
    if x.shape[1..] != [c, h, w] {
        return Err(Error::Shape(format!("input {:?} does not match plan input {:?}", x.shape, p.input_shape)));
    }
    let (eta, _) = quantize_activation(&x.data, &p.input_quant)?;
    IntTensor::from_vec(x.shape, eta)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpTrace {
    pub name: String,
    pub op: String,
    /// Largest magnitude of any intermediate the op computed.
    pub max_abs: i64,
    /// SHA-256 of the op's output slot, little-endian `i32` per level.
    pub checksum: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExecReport {
    pub samples: usize,
    pub ops: Vec<OpTrace>,
    pub max_accumulator: i64,
    /// Primitives actually executed, counted by the kernels.
    pub census: Census,
    /// Real-valued operations executed before the terminal dequantization.
    pub float_ops_before_dequant: u64,
    pub dequant_mults: u64,
    pub wall_ns: u128,
}

#[derive(Clone, Debug)]
pub struct ExecOutput {
    /// Last integer slot.
    pub eta: IntValue,
    /// Dequantized output when the plan ends in a dequantization.
    pub real: Option<Vec<Tensor>>,
    pub report: ExecReport,
    /// Every slot, when requested.
    pub slots: Option<Vec<IntValue>>,
}

#[derive(Default)]
struct Counter {
    census: Census,
    max_abs: i64,
}

impl Counter {
    fn check(&mut self, op: usize, v: i64) -> Result<i32> {
        self.max_abs = self.max_abs.max(v.abs());
        i32::try_from(v).map_err(|_| Error::Overflow { op })
    }
}

fn checksum(v: &IntValue) -> String {
    let mut h = Sha256::new();
    for t in v {
        for x in &t.data {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Integer convolution with zero padding; taps outside the input are skipped.
pub fn int_conv_apply(
    x: &IntTensor,
    weights: &[i32],
    geom: (usize, usize, usize, usize, usize, usize),
) -> Result<IntTensor> {
    let mut ctr = Counter::default();
    int_conv(x, weights, geom, 0, &mut ctr)
}

fn int_conv(
    x: &IntTensor,
    weights: &[i32],
    (in_c, out_c, kh, kw, stride, pad): (usize, usize, usize, usize, usize, usize),
    op: usize,
    ctr: &mut Counter,
) -> Result<IntTensor> {
    let [n, c, h, w] = x.shape;
    if c != in_c || weights.len() != out_c * in_c * kh * kw || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Shape(format!("conv input {:?}", x.shape)));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = IntTensor::zeros([n, out_c, oh, ow]);
    let (mut muls, mut adds) = (0u64, 0u64);
    let mut k = 0;
    for b in 0..n {
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i64;
                    let mut taps = 0u64;
                    for ci in 0..in_c {
                        let xb = ((b * in_c + ci) * h) * w;
                        let wb = (o * in_c + ci) * kh * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data[xb + iy as usize * w + ix as usize] as i64
                                    * weights[wb + ky * kw + kx] as i64;
                                taps += 1;
                            }
                        }
                    }
                    muls += taps;
                    adds += taps.saturating_sub(1);
                    y.data[k] = ctr.check(op, acc)?;
                    k += 1;
                }
            }
        }
    }
    ctr.census.add(Prim::Mul8, muls);
    ctr.census.add(Prim::Add32, adds);
    Ok(y)
}

/// `unscaled + ((scaled * c + 2^(d-1)) >> d)` per channel.
pub fn skip_add_apply(a: &IntTensor, b: &IntTensor, channels: &[SkipChannel]) -> Result<IntTensor> {
    let mut ctr = Counter::default();
    skip_add(a, b, channels, 0, &mut ctr)
}

fn skip_add(a: &IntTensor, b: &IntTensor, channels: &[SkipChannel], op: usize, ctr: &mut Counter) -> Result<IntTensor> {
    if a.shape != b.shape || channels.len() != a.shape[1] {
        return Err(Error::Shape(format!("skip operands {:?} and {:?}", a.shape, b.shape)));
    }
    let mut y = IntTensor::zeros(a.shape);
    for i in 0..a.data.len() {
        let ch = &channels[a.channel_of(i)];
        let (s, u) = if ch.scaled == 0 { (a.data[i], b.data[i]) } else { (b.data[i], a.data[i]) };
        let t = ctr.check(op, s as i64 * ch.mult.c + ch.mult.half())?;
        let scaled = t as i64 >> ch.mult.d;
        y.data[i] = ctr.check(op, scaled + u as i64)?;
        count_dyadic(&mut ctr.census, &ch.mult);
        ctr.census.add(Prim::Add32, 1);
    }
    Ok(y)
}

fn count_dyadic(c: &mut Census, m: &DyadicRational) {
    c.add(Prim::Mul32, 1);
    if m.d > 0 {
        c.add(Prim::Add32, 1);
        c.add(Prim::Shift32, 1);
    }
}

fn max_pool(x: &IntTensor, kernel: Option<usize>, ctr: &mut Counter) -> Result<IntTensor> {
    let [n, c, h, w] = x.shape;
    let (k_h, k_w) = match kernel {
        Some(k) if k > 0 && h % k == 0 && w % k == 0 => (k, k),
        Some(k) => return Err(Error::Shape(format!("window {k} does not tile {:?}", x.shape))),
        None => (h, w),
    };
    let (oh, ow) = (h / k_h, w / k_w);
    let mut y = IntTensor::zeros([n, c, oh, ow]);
    let mut k = 0;
    for bc in 0..n * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = i32::MIN;
                for ky in 0..k_h {
                    for kx in 0..k_w {
                        m = m.max(x.data[base + (oy * k_h + ky) * w + ox * k_w + kx]);
                    }
                }
                y.data[k] = m;
                k += 1;
            }
        }
    }
    ctr.census.add(Prim::Cmp32, (k_h * k_w - 1) as u64 * y.data.len() as u64);
    Ok(y)
}

fn upsample(x: &IntTensor) -> IntTensor {
    let [n, c, h, w] = x.shape;
    let mut y = IntTensor::zeros([n, c, 2 * h, 2 * w]);
    for bc in 0..n * c {
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                y.data[(bc * 2 * h + yy) * 2 * w + xx] = x.data[(bc * h + yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

/// Runs `p` on a batch of quantized inputs using only integer arithmetic up
/// to the terminal dequantization. Every intermediate is checked against the
/// `i32` range.
pub fn exec_plan(p: &IntegerPlan, input: &IntTensor, keep_slots: bool) -> Result<ExecOutput> {
    let report = validate_plan(p);
    if let Some(i) = report.first_issue() {
        return Err(Error::InvalidPlan(format!("op {:?} ({}): {}", i.op, i.name, i.msg)));
    }
    let [c, h, w] = p.input_shape;
    if input.shape[1..] != [c, h, w] {
        return Err(Error::Shape(format!("input {:?} does not match plan input {:?}", input.shape, p.input_shape)));
    }
    let max_in = p.input_quant.max_eta();
    if input.data.iter().any(|&v| v < 0 || v > max_in) {
        return Err(Error::InvalidTensor(format!("input codes outside [0, {max_in}]")));
    }
    let start = Instant::now();
    let mut slots: Vec<IntValue> = vec![vec![input.clone()]];
    let mut traces = Vec::with_capacity(p.ops.len());
    let mut census = Census::default();
    let mut float_ops = 0;
    let mut real = None;
    let mut dequant_mults = 0;
    for (i, op) in p.ops.iter().enumerate() {
        let mut ctr = Counter::default();
        let x = &slots[op.inputs[0]];
        let out: IntValue = match &op.kind {
            OpKind::IntConv {
                in_c,
                out_c,
                kh,
                kw,
                stride,
                pad,
                weights,
                ..
            } => x
                .iter()
                .map(|t| int_conv(t, weights, (*in_c, *out_c, *kh, *kw, *stride, *pad), i, &mut ctr))
                .collect::<Result<_>>()?,
            OpKind::BnOffsetAdd { offsets, .. } => {
                let mut out = Vec::with_capacity(x.len());
                for (l, t) in x.iter().enumerate() {
                    let row = per_level(offsets, l);
                    let mut y = t.clone();
                    for (j, v) in y.data.iter_mut().enumerate() {
                        *v = ctr.check(i, *v as i64 + row[t.channel_of(j)])?;
                    }
                    ctr.census.add(Prim::Add32, y.data.len() as u64);
                    out.push(y);
                }
                out
            }
            OpKind::Requant { mult, lo, hi, .. } => {
                let mut out = Vec::with_capacity(x.len());
                for (l, t) in x.iter().enumerate() {
                    let row = per_level(mult, l);
                    let mut y = t.clone();
                    for (j, v) in y.data.iter_mut().enumerate() {
                        let m = &row[t.channel_of(j)];
                        let acc = ctr.check(i, *v as i64 * m.c + m.half())?;
                        *v = (acc as i64 >> m.d).clamp(*lo, *hi) as i32;
                        count_dyadic(&mut ctr.census, m);
                        ctr.census.add(Prim::Cmp32, 2);
                    }
                    out.push(y);
                }
                out
            }
            OpKind::DyadicSkipAdd { channels, .. } => {
                let y = &slots[op.inputs[1]];
                let mut out = Vec::with_capacity(x.len());
                for (l, (a, b)) in x.iter().zip(y).enumerate() {
                    out.push(skip_add(a, b, per_level(channels, l), i, &mut ctr)?);
                }
                out
            }
            OpKind::IntMaxPool { kernel } => x
                .iter()
                .map(|t| max_pool(t, *kernel, &mut ctr))
                .collect::<Result<_>>()?,
            OpKind::IntUpsample => x.iter().map(upsample).collect(),
            OpKind::PyramidGather => op.inputs.iter().map(|&s| slots[s][0].clone()).collect(),
            OpKind::Dequant { alpha } => {
                let mut r = Vec::with_capacity(x.len());
                for (l, t) in x.iter().enumerate() {
                    let row = per_level(alpha, l);
                    let data = t
                        .data
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| v as f64 * row[t.channel_of(j)])
                        .collect();
                    dequant_mults += t.data.len() as u64;
                    r.push(Tensor::from_vec(t.shape, data)?);
                }
                real = Some(r);
                x.clone()
            }
        };
        if !matches!(op.kind, OpKind::Dequant { .. }) {
            float_ops += ctr.census.float_entries();
        }
        census.merge(&ctr.census);
        traces.push(OpTrace {
            name: op.name.clone(),
            op: op.kind.name().into(),
            max_abs: ctr.max_abs,
            checksum: checksum(&out),
        });
        slots.push(out);
    }
    let wall_ns = start.elapsed().as_nanos();
    debug_assert_eq!(float_ops, 0);
    let last_int = p
        .ops
        .iter()
        .rposition(|o| !matches!(o.kind, OpKind::Dequant { .. }))
        .map_or(0, |i| i + 1);
    let eta = slots[last_int].clone();
    let report = ExecReport {
        samples: input.shape[0],
        max_accumulator: traces.iter().map(|t| t.max_abs).max().unwrap_or(0),
        ops: traces,
        census,
        float_ops_before_dequant: float_ops,
        dequant_mults,
        wall_ns,
    };
    Ok(ExecOutput {
        eta,
        real,
        report,
        slots: keep_slots.then_some(slots),
    })
}
