use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowering::{analyze, per_level, IntegerPlan, OpKind};

/// Arithmetic primitive priced by the cost model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prim {
    Add8,
    Mul8,
    Add32,
    Mul32,
    Shift32,
    Cmp32,
    FpAdd32,
    FpMul32,
    FpAdd16,
    FpMul16,
}

impl Prim {
    pub fn is_float(self) -> bool {
        matches!(self, Prim::FpAdd32 | Prim::FpMul32 | Prim::FpAdd16 | Prim::FpMul16)
    }
}

/// Primitive counts for one input sample (or a whole batch for dynamic counts).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub counts: BTreeMap<Prim, u64>,
}

impl Census {
    pub fn add(&mut self, p: Prim, n: u64) {
        if n > 0 {
            *self.counts.entry(p).or_insert(0) += n;
        }
    }

    pub fn get(&self, p: Prim) -> u64 {
        self.counts.get(&p).copied().unwrap_or(0)
    }

    pub fn merge(&mut self, other: &Census) {
        for (&p, &n) in &other.counts {
            self.add(p, n);
        }
    }

    pub fn scaled(&self, k: u64) -> Census {
        Census {
            counts: self.counts.iter().map(|(&p, &n)| (p, n * k)).collect(),
        }
    }

    pub fn float_entries(&self) -> u64 {
        self.counts.iter().filter(|(p, _)| p.is_float()).map(|(_, n)| n).sum()
    }

    /// The same operation counts executed in 32-bit float: multiplies and
    /// shifts become float multiplies, adds and compares float adds.
    pub fn as_float32(&self) -> Census {
        let mut out = Census::default();
        for (&p, &n) in &self.counts {
            let f = match p {
                Prim::Mul8 | Prim::Mul32 | Prim::Shift32 | Prim::FpMul32 | Prim::FpMul16 => Prim::FpMul32,
                Prim::Add8 | Prim::Add32 | Prim::Cmp32 | Prim::FpAdd32 | Prim::FpAdd16 => Prim::FpAdd32,
            };
            out.add(f, n);
        }
        out
    }
}

/// Energy per primitive in picojoules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub prices: BTreeMap<Prim, f64>,
}

impl Default for CostModel {
    fn default() -> Self {
        let prices = [
            (Prim::Add8, 0.03),
            (Prim::Mul8, 0.2),
            (Prim::Add32, 0.1),
            (Prim::Mul32, 3.1),
            (Prim::FpAdd32, 0.9),
            (Prim::FpMul32, 3.7),
            (Prim::FpAdd16, 0.4),
            (Prim::FpMul16, 1.1),
            // A shift or compare is priced like a 32-bit add.
            (Prim::Shift32, 0.1),
            (Prim::Cmp32, 0.1),
        ];
        Self {
            prices: prices.into_iter().collect(),
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        match self.prices.iter().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            Some((p, v)) => Err(Error::InvalidConfig(format!("price of {p:?} must be positive, got {v}"))),
            None => Ok(()),
        }
    }
}

/// `sum(count * price)` in pJ.
pub fn estimate_cost(census: &Census, model: &CostModel) -> Result<f64> {
    let mut total = 0.0;
    for (p, &n) in &census.counts {
        let price = model
            .prices
            .get(p)
            .ok_or_else(|| Error::MissingPrice(format!("{p:?}")))?;
        total += n as f64 * price;
    }
    Ok(total)
}

/// Number of kernel taps inside the unpadded input, summed over output positions.
pub(crate) fn in_bounds_taps(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> u64 {
    let axis = |len: usize, k: usize| -> Vec<u64> {
        let out = (len + 2 * pad - k) / stride + 1;
        (0..out)
            .map(|o| {
                (0..k)
                    .filter(|&t| {
                        let p = (o * stride + t) as isize - pad as isize;
                        p >= 0 && (p as usize) < len
                    })
                    .count() as u64
            })
            .collect()
    };
    let (ys, xs) = (axis(h, kh), axis(w, kw));
    let sx: u64 = xs.iter().sum();
    ys.iter().map(|y| y * sx).sum()
}

pub(crate) fn conv_outputs(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> u64 {
    (((h + 2 * pad - kh) / stride + 1) * ((w + 2 * pad - kw) / stride + 1)) as u64
}

/// Static per-sample census of every integer op. The terminal dequantization
/// is excluded; see [`dequant_float_mults`].
pub fn op_census(p: &IntegerPlan) -> Result<Census> {
    let (slots, _, issues) = analyze(p);
    if let Some(i) = issues.first() {
        return Err(Error::InvalidPlan(format!("op {:?}: {}", i.op, i.msg)));
    }
    let mut census = Census::default();
    for (i, op) in p.ops.iter().enumerate() {
        let x = slots[op.inputs[0]].as_ref().expect("analyzed");
        let out = slots[i + 1].as_ref().expect("analyzed");
        for (l, s) in x.shapes.iter().enumerate() {
            let o = out.shapes[l];
            let plane = (o[1] * o[2]) as u64;
            match &op.kind {
                OpKind::IntConv {
                    in_c,
                    out_c,
                    kh,
                    kw,
                    stride,
                    pad,
                    ..
                } => {
                    let taps = in_bounds_taps(s[1], s[2], *kh, *kw, *stride, *pad) * *in_c as u64 * *out_c as u64;
                    let outs = conv_outputs(s[1], s[2], *kh, *kw, *stride, *pad) * *out_c as u64;
                    census.add(Prim::Mul8, taps);
                    census.add(Prim::Add32, taps - outs);
                }
                OpKind::BnOffsetAdd { .. } => census.add(Prim::Add32, o[0] as u64 * plane),
                OpKind::Requant { mult, .. } => {
                    for m in per_level(mult, l) {
                        census.add(Prim::Mul32, plane);
                        if m.d > 0 {
                            census.add(Prim::Add32, plane);
                            census.add(Prim::Shift32, plane);
                        }
                        census.add(Prim::Cmp32, 2 * plane);
                    }
                }
                OpKind::DyadicSkipAdd { channels, .. } => {
                    for ch in per_level(channels, l) {
                        census.add(Prim::Mul32, plane);
                        if ch.mult.d > 0 {
                            census.add(Prim::Add32, plane);
                            census.add(Prim::Shift32, plane);
                        }
                        census.add(Prim::Add32, plane);
                    }
                }
                OpKind::IntMaxPool { kernel } => {
                    let window = match kernel {
                        Some(k) => (k * k) as u64,
                        None => (s[1] * s[2]) as u64,
                    };
                    census.add(Prim::Cmp32, (window - 1) * o[0] as u64 * plane);
                }
                OpKind::IntUpsample | OpKind::PyramidGather | OpKind::Dequant { .. } => {}
            }
            if matches!(op.kind, OpKind::PyramidGather) {
                break;
            }
        }
    }
    Ok(census)
}

/// Real multiplies performed by the terminal dequantization, per sample.
pub fn dequant_float_mults(p: &IntegerPlan) -> Result<u64> {
    let (slots, _, _) = analyze(p);
    let mut n = 0;
    for (i, op) in p.ops.iter().enumerate() {
        if let OpKind::Dequant { .. } = op.kind {
            let out = slots[i + 1].as_ref().ok_or_else(|| Error::InvalidPlan("unanalyzable plan".into()))?;
            n += out.shapes.iter().map(|s| (s[0] * s[1] * s[2]) as u64).sum::<u64>();
        }
    }
    Ok(n)
}
