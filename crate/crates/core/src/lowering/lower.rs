use serde::{Deserialize, Serialize};

use super::dyadic::{self, approx, DyadicRational, LowerMode, ACC_MAX, DEFAULT_D_MAX};
use super::plan::{IntegerPlan, Op, OpKind, SkipChannel, PLAN_VERSION};
use super::validate::{analyze, validate_plan};
use crate::error::{Error, Result};
use crate::quantcore::{quantize_weight, ActQuantizer, WtQuantizer};
use crate::traingraph::{content_hash, BatchNorm, Conv2d, Layer, Linear, ModelGraph, QuantMode, GAMMA_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LowerConfig {
    pub d_max: u32,
    /// Search used for skip-connection multipliers; requantization always uses the free search.
    pub mode: LowerMode,
}

impl Default for LowerConfig {
    fn default() -> Self {
        Self {
            d_max: DEFAULT_D_MAX,
            mode: LowerMode::Aqd,
        }
    }
}

/// `2 eta_w - (2^b - 1)`.
pub fn map_weights(eta_w: &[i32], bits: u32) -> Vec<i32> {
    let q = (1i32 << bits) - 1;
    eta_w.iter().map(|e| 2 * e - q).collect()
}

fn lower_weights(
    weights: &[f64],
    wq: &WtQuantizer,
    input: &ActQuantizer,
    geom: [usize; 6],
) -> Result<(OpKind, f64)> {
    let [in_c, out_c, kh, kw, stride, pad] = geom;
    let (eta, _) = quantize_weight(weights, wq)?;
    let mapped = map_weights(&eta, wq.bits);
    let alpha = input.scale() * wq.nu / wq.levels();
    let bound = (in_c * kh * kw) as i64 * input.max_eta() as i64 * wq.max_eta() as i64;
    if bound > ACC_MAX {
        return Err(Error::AccumulatorBound {
            context: format!("{in_c}x{kh}x{kw} conv at {} x {} bits", input.bits, wq.bits),
            bound,
        });
    }
    Ok((
        OpKind::IntConv {
            in_c,
            out_c,
            kh,
            kw,
            stride,
            pad,
            weight_bits: wq.bits,
            weights: mapped,
            alpha,
        },
        alpha,
    ))
}

/// Integer conv with mapped weights and the accumulator scale
/// `alpha_conv = (nu_x / Q_x)(nu_w / Q_w)`.
pub fn lower_conv(conv: &Conv2d, input: &ActQuantizer) -> Result<(OpKind, f64)> {
    lower_weights(
        &conv.weights,
        &conv.wq,
        input,
        [conv.in_c, conv.out_c, conv.kernel, conv.kernel, conv.stride, conv.padding],
    )
}

/// A fully connected layer is a conv whose kernel covers the whole input.
pub fn lower_linear(l: &Linear, input: &ActQuantizer) -> Result<(OpKind, f64)> {
    let [c, h, w] = l.in_shape;
    lower_weights(&l.weights, &l.wq, input, [c, l.out_features, h, w, 1, 0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoweredBn {
    /// Unrounded offsets `s`.
    pub s: Vec<f64>,
    /// `round(s)`, half away from zero.
    pub offsets: Vec<i64>,
    pub alpha_z: Vec<f64>,
}

/// Per channel `s = (beta sqrt(var + eps) / gamma - mean) / alpha_conv` and
/// `alpha_z = alpha_conv gamma / sqrt(var + eps)`.
pub fn lower_bn(bn: &BatchNorm, alpha_conv: f64) -> Result<LoweredBn> {
    let mut out = LoweredBn {
        s: Vec::with_capacity(bn.channels),
        offsets: Vec::with_capacity(bn.channels),
        alpha_z: Vec::with_capacity(bn.channels),
    };
    for c in 0..bn.channels {
        let gamma = bn.gamma[c];
        if !(gamma >= GAMMA_MIN) {
            return Err(Error::GammaBelowClamp {
                channel: c,
                gamma,
                min: GAMMA_MIN,
            });
        }
        if !(bn.running_var[c] >= 0.0) {
            return Err(Error::InvalidGraph(format!("negative running variance in channel {c}")));
        }
        let sd = (bn.running_var[c] + bn.eps).sqrt();
        let s = (bn.beta[c] * sd / gamma - bn.running_mean[c]) / alpha_conv;
        let rounded = s.round();
        if !(rounded.abs() <= ACC_MAX as f64) {
            return Err(Error::AccumulatorBound {
                context: format!("BN offset of channel {c}"),
                bound: rounded.abs().min(i64::MAX as f64) as i64,
            });
        }
        out.s.push(s);
        out.offsets.push(rounded as i64);
        out.alpha_z.push(alpha_conv * gamma / sd);
    }
    Ok(out)
}

/// Per-channel skip fusion. The operand with the larger scale is multiplied
/// by the dyadic approximation of `alpha_large / alpha_small`; the smaller
/// scale survives. `max_abs` bounds `|eta|` of each operand.
pub fn lower_skip(
    alpha1: &[f64],
    alpha2: &[f64],
    max_abs: (i64, i64),
    cfg: &LowerConfig,
) -> Result<(Vec<SkipChannel>, Vec<f64>)> {
    if alpha1.len() != alpha2.len() {
        return Err(Error::Shape(format!(
            "skip operands have {} and {} channels",
            alpha1.len(),
            alpha2.len()
        )));
    }
    let mut chans = Vec::with_capacity(alpha1.len());
    let mut surviving = Vec::with_capacity(alpha1.len());
    for (&a1, &a2) in alpha1.iter().zip(alpha2) {
        let (scaled, big, small, m) = if a2 >= a1 { (1u8, a2, a1, max_abs.1) } else { (0u8, a1, a2, max_abs.0) };
        let (mult, error) = approx(cfg.mode, big, small, cfg.d_max, m)?;
        chans.push(SkipChannel { scaled, mult, error });
        surviving.push(small);
    }
    Ok((chans, surviving))
}

fn requant_mults(alpha_in: &[f64], levels: f64, nu: f64, d_max: u32, max_abs: i64) -> Result<Vec<DyadicRational>> {
    alpha_in
        .iter()
        .map(|a| Ok(dyadic::dyadic_approx(a * levels, nu, d_max, max_abs)?.0))
        .collect()
}

/// Requantization into the grid of `next`: per channel `r = alpha_in (2^b - 1) / nu`
/// approximated by `c / 2^d`, clipped to `[0, 2^b - 1]`.
pub fn build_requant(alpha_in: &[f64], next: &ActQuantizer, d_max: u32, max_abs: i64) -> Result<OpKind> {
    Ok(OpKind::Requant {
        mult: vec![requant_mults(alpha_in, next.levels(), next.nu, d_max, max_abs)?],
        bits: next.bits,
        lo: 0,
        hi: next.max_eta() as i64,
        alpha: next.scale(),
    })
}

/// Lowering state of one graph value.
#[derive(Clone, Debug)]
struct Desc {
    slot: usize,
    /// Scale per level and channel.
    alpha: Vec<Vec<f64>>,
    /// Set when the value lies on the grid of this activation quantizer.
    grid: Option<ActQuantizer>,
    /// A ReLU still has to be applied (by the next clip).
    relu: bool,
    /// Set when the value is a raw conv accumulator with this scale.
    conv_alpha: Option<f64>,
}

struct Builder {
    plan: IntegerPlan,
}

impl Builder {
    fn push(&mut self, name: &str, inputs: Vec<usize>, kind: OpKind) -> usize {
        self.plan.ops.push(Op {
            name: name.to_string(),
            inputs,
            kind,
        });
        self.plan.ops.len()
    }

    /// Static `max |eta|` of a slot.
    fn max_abs(&self, slot: usize) -> Result<i64> {
        let (slots, _, issues) = analyze(&self.plan);
        match slots.get(slot).and_then(|s| s.as_ref()) {
            Some(s) => Ok(s.lo.abs().max(s.hi.abs())),
            None => Err(Error::InvalidPlan(
                issues.first().map(|i| i.msg.clone()).unwrap_or_else(|| "unknown slot".into()),
            )),
        }
    }

    fn requant(&mut self, name: &str, x: &Desc, levels: f64, nu: f64, bits: u32, lo: i64, hi: i64) -> Result<usize> {
        let max_abs = self.max_abs(x.slot)?;
        let mult = x
            .alpha
            .iter()
            .map(|row| requant_mults(row, levels, nu, self.plan.d_max, max_abs))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(
            name,
            vec![x.slot],
            OpKind::Requant {
                mult,
                bits,
                lo,
                hi,
                alpha: nu / levels,
            },
        ))
    }
}

fn unsupported(i: usize, msg: impl Into<String>) -> Error {
    Error::Unsupported {
        node: i,
        kind: msg.into(),
    }
}

/// Lowers a QAT graph to an integer plan and checks it with [`validate_plan`].
pub fn lower_model(g: &ModelGraph, cfg: &LowerConfig) -> Result<IntegerPlan> {
    if g.mode != QuantMode::Qat {
        return Err(Error::InvalidGraph("only QAT graphs can be lowered".into()));
    }
    let shapes = g.validate()?;
    if cfg.d_max > dyadic::D_LIMIT {
        return Err(Error::InvalidConfig(format!("d_max {} exceeds {}", cfg.d_max, dyadic::D_LIMIT)));
    }
    let input_shape = g.input_shape()?;
    let bits = g
        .nodes
        .iter()
        .find_map(|n| match &n.layer {
            Layer::Quant { q, boundary: false } => Some(q.bits),
            _ => None,
        })
        .unwrap_or(8);
    let mut b = Builder {
        plan: IntegerPlan {
            format_version: PLAN_VERSION,
            source_hash: content_hash(g),
            input_shape,
            input_quant: ActQuantizer { nu: 1.0, bits: 8 },
            levels: g.levels,
            bits,
            mode: cfg.mode,
            d_max: cfg.d_max,
            ops: Vec::new(),
            config: serde_json::Value::Null,
        },
    };
    let mut descs: Vec<Option<Desc>> = Vec::with_capacity(g.nodes.len());
    for (i, node) in g.nodes.iter().enumerate() {
        let name = node.name.as_str();
        let nlev = shapes[i].len();
        let channels = |l: usize| shapes[i][l][0];
        let input = |k: usize| -> Result<Desc> {
            descs[node.inputs[k]]
                .clone()
                .ok_or_else(|| unsupported(i, "the raw input must feed an 8-bit quantizer"))
        };
        let desc = match &node.layer {
            Layer::Input { .. } => None,
            Layer::Quant { q, .. } if matches!(g.nodes[node.inputs[0]].layer, Layer::Input { .. }) => {
                if q.bits != 8 {
                    return Err(unsupported(i, "input quantizer must be 8-bit"));
                }
                b.plan.input_quant = *q;
                Some(Desc {
                    slot: 0,
                    alpha: vec![vec![q.scale(); input_shape[0]]],
                    grid: Some(*q),
                    relu: false,
                    conv_alpha: None,
                })
            }
            Layer::Quant { q, .. } => {
                let x = input(0)?;
                let slot = b.requant(name, &x, q.levels(), q.nu, q.bits, 0, q.max_eta() as i64)?;
                Some(Desc {
                    slot,
                    alpha: (0..nlev).map(|l| vec![q.scale(); channels(l)]).collect(),
                    grid: Some(*q),
                    relu: false,
                    conv_alpha: None,
                })
            }
            Layer::OutputQuant { q } => {
                if i != g.output() {
                    return Err(unsupported(i, "output quantizer must be the last node"));
                }
                let x = input(0)?;
                let hi = q.max_eta() as i64;
                let lo = if x.relu { 0 } else { -hi };
                let slot = b.requant(name, &x, q.levels(), q.nu, q.bits, lo, hi)?;
                let alpha: Vec<Vec<f64>> = (0..nlev).map(|l| vec![q.scale(); channels(l)]).collect();
                let out = b.push(name, vec![slot], OpKind::Dequant { alpha: alpha.clone() });
                Some(Desc {
                    slot: out,
                    alpha,
                    grid: None,
                    relu: false,
                    conv_alpha: None,
                })
            }
            Layer::Conv2d(_) | Layer::Linear(_) => {
                let x = input(0)?;
                let q = x
                    .grid
                    .filter(|_| !x.relu)
                    .ok_or_else(|| unsupported(i, "conv input must come from an activation quantizer"))?;
                let (kind, alpha) = match &node.layer {
                    Layer::Conv2d(c) => lower_conv(c, &q)?,
                    Layer::Linear(l) => lower_linear(l, &q)?,
                    _ => unreachable!(),
                };
                let slot = b.push(name, vec![x.slot], kind);
                Some(Desc {
                    slot,
                    alpha: (0..nlev).map(|l| vec![alpha; channels(l)]).collect(),
                    grid: None,
                    relu: false,
                    conv_alpha: Some(alpha),
                })
            }
            Layer::BatchNorm(_) | Layer::MultiLevelBn(_) => {
                let x = input(0)?;
                let a = x
                    .conv_alpha
                    .ok_or_else(|| unsupported(i, "normalization must directly follow a conv"))?;
                let bns: Vec<&BatchNorm> = match &node.layer {
                    Layer::BatchNorm(bn) => vec![bn],
                    Layer::MultiLevelBn(ml) => {
                        if nlev != ml.levels.len() {
                            return Err(unsupported(i, "multi-level BN on a single-level value"));
                        }
                        ml.levels.iter().collect()
                    }
                    _ => unreachable!(),
                };
                let lowered = bns.iter().map(|bn| lower_bn(bn, a)).collect::<Result<Vec<_>>>()?;
                let alpha: Vec<Vec<f64>> = (0..nlev)
                    .map(|l| lowered[if lowered.len() == 1 { 0 } else { l }].alpha_z.clone())
                    .collect();
                let slot = b.push(
                    name,
                    vec![x.slot],
                    OpKind::BnOffsetAdd {
                        offsets: lowered.iter().map(|l| l.offsets.clone()).collect(),
                        alpha: lowered.iter().map(|l| l.alpha_z.clone()).collect(),
                    },
                );
                Some(Desc {
                    slot,
                    alpha,
                    grid: None,
                    relu: false,
                    conv_alpha: None,
                })
            }
            Layer::Relu => {
                let mut x = input(0)?;
                if x.grid.is_none() {
                    x.relu = true;
                }
                x.conv_alpha = None;
                Some(x)
            }
            Layer::MaxPool { kernel } => {
                let x = input(0)?;
                let slot = b.push(name, vec![x.slot], OpKind::IntMaxPool { kernel: *kernel });
                Some(Desc {
                    slot,
                    conv_alpha: None,
                    ..x
                })
            }
            Layer::Upsample => {
                let x = input(0)?;
                let slot = b.push(name, vec![x.slot], OpKind::IntUpsample);
                Some(Desc {
                    slot,
                    conv_alpha: None,
                    ..x
                })
            }
            Layer::SkipAdd => {
                let (x, y) = (input(0)?, input(1)?);
                if x.relu || y.relu {
                    return Err(unsupported(i, "ReLU before a skip-add must be followed by a quantizer"));
                }
                let max_abs = (b.max_abs(x.slot)?, b.max_abs(y.slot)?);
                let mut chans = Vec::with_capacity(nlev);
                let mut alpha = Vec::with_capacity(nlev);
                for l in 0..nlev {
                    let (c, a) = lower_skip(&x.alpha[l], &y.alpha[l], max_abs, cfg)?;
                    chans.push(c);
                    alpha.push(a);
                }
                let slot = b.push(
                    name,
                    vec![x.slot, y.slot],
                    OpKind::DyadicSkipAdd {
                        channels: chans,
                        alpha: alpha.clone(),
                    },
                );
                Some(Desc {
                    slot,
                    alpha,
                    grid: None,
                    relu: false,
                    conv_alpha: None,
                })
            }
            Layer::Pyramid => {
                let parts = (0..node.inputs.len()).map(input).collect::<Result<Vec<_>>>()?;
                let relu = parts[0].relu;
                if parts.iter().any(|p| p.relu != relu) {
                    return Err(unsupported(i, "pyramid levels disagree on a pending ReLU"));
                }
                let grid = parts[0].grid.filter(|q| parts.iter().all(|p| p.grid == Some(*q)));
                let slot = b.push(name, parts.iter().map(|p| p.slot).collect(), OpKind::PyramidGather);
                Some(Desc {
                    slot,
                    alpha: parts.iter().map(|p| p.alpha[0].clone()).collect(),
                    grid,
                    relu,
                    conv_alpha: None,
                })
            }
        };
        descs.push(desc);
    }
    let report = validate_plan(&b.plan);
    if let Some(issue) = report.first_issue() {
        return Err(Error::InvalidPlan(format!(
            "op {:?} ({}): {}",
            issue.op, issue.name, issue.msg
        )));
    }
    Ok(b.plan)
}
