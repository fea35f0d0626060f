//! Static plan checks: structure, shapes, integer-only data flow and
//! worst-case accumulator magnitudes.

use serde::{Deserialize, Serialize};

use super::dyadic::{shift_round, DyadicRational, ACC_MAX, D_LIMIT};
use super::plan::{IntegerPlan, Op, OpKind};

/// Shapes and value range of one slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotInfo {
    /// Per-level `(C, H, W)`.
    pub shapes: Vec<[usize; 3]>,
    pub lo: i64,
    pub hi: i64,
    pub real: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanIssue {
    /// Op index, `None` for plan-level problems.
    pub op: Option<usize>,
    pub name: String,
    pub msg: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub valid: bool,
    pub ops: usize,
    /// Largest static magnitude of any intermediate over the whole plan.
    pub max_accumulator: i64,
    /// Largest static intermediate magnitude per op (0 for data-movement ops).
    pub op_bounds: Vec<i64>,
    pub issues: Vec<PlanIssue>,
}

impl PlanReport {
    pub fn first_issue(&self) -> Option<&PlanIssue> {
        self.issues.first()
    }
}

fn unsigned_max(bits: u32) -> i64 {
    (1i64 << bits) - 1
}

fn signed_max(bits: u32) -> i64 {
    (1i64 << (bits - 1)) - 1
}

/// Whether `[lo, hi]` is a legal clip range for `bits`: unsigned `[0, 2^b-1]`,
/// or signed `[-(2^(b-1)-1), 2^(b-1)-1]` with the lower end optionally raised to 0.
pub fn clip_matches_bits(lo: i64, hi: i64, bits: u32) -> bool {
    if !(2..=16).contains(&bits) {
        return false;
    }
    (lo == 0 && hi == unsigned_max(bits)) || (hi == signed_max(bits) && (lo == -hi || lo == 0))
}

fn mapped_range(x_lo: i64, x_hi: i64, m: &DyadicRational) -> (i64, i64) {
    (shift_round(x_lo * m.c, m.d), shift_round(x_hi * m.c, m.d))
}

/// Shapes and static ranges of every slot plus per-op intermediate bounds.
/// Analysis stops at the first structural problem; later slots are `None`.
pub fn analyze(p: &IntegerPlan) -> (Vec<Option<SlotInfo>>, Vec<i64>, Vec<PlanIssue>) {
    let mut issues = Vec::new();
    let mut slots: Vec<Option<SlotInfo>> = vec![Some(SlotInfo {
        shapes: vec![p.input_shape],
        lo: 0,
        hi: unsigned_max(p.input_quant.bits),
        real: false,
    })];
    let mut bounds = Vec::with_capacity(p.ops.len());
    if p.levels == 0 {
        issues.push(PlanIssue {
            op: None,
            name: String::new(),
            msg: "plan declares zero levels".into(),
        });
    }
    let mut broken = false;
    for (i, op) in p.ops.iter().enumerate() {
        if broken {
            slots.push(None);
            bounds.push(0);
            continue;
        }
        let mut fail = |msg: String| {
            issues.push(PlanIssue {
                op: Some(i),
                name: op.name.clone(),
                msg,
            })
        };
        match step(p, i, op, &slots) {
            Ok((info, bound, soft)) => {
                for m in soft {
                    fail(m);
                }
                slots.push(Some(info));
                bounds.push(bound);
            }
            Err(msg) => {
                fail(msg);
                broken = true;
                slots.push(None);
                bounds.push(0);
            }
        }
    }
    (slots, bounds, issues)
}

type Step = (SlotInfo, i64, Vec<String>);

fn step(p: &IntegerPlan, i: usize, op: &Op, slots: &[Option<SlotInfo>]) -> Result<Step, String> {
    let levels = p.levels.max(1);
    let arity = op.kind.arity(levels);
    if op.inputs.len() != arity {
        return Err(format!("expects {arity} inputs, has {}", op.inputs.len()));
    }
    let mut ins = Vec::with_capacity(arity);
    for &s in &op.inputs {
        if s > i {
            return Err(format!("reads slot {s} before it is written"));
        }
        let info = slots[s].as_ref().ok_or_else(|| format!("reads slot {s} of an invalid op"))?;
        if info.real {
            return Err(format!("consumes real-valued slot {s}"));
        }
        ins.push(info);
    }
    let mut soft = Vec::new();
    let x = ins[0];
    let nlev = x.shapes.len();
    let check_table = |len: usize, what: &str| -> Result<(), String> {
        if len == 1 || len == nlev {
            Ok(())
        } else {
            Err(format!("{what} has {len} level rows for a {nlev}-level value"))
        }
    };
    let check_channels = |rows: &[usize], what: &str| -> Result<(), String> {
        for (l, s) in x.shapes.iter().enumerate() {
            let row = if rows.len() == 1 { rows[0] } else { rows[l] };
            if row != s[0] {
                return Err(format!("{what} has {row} channels, value has {}", s[0]));
            }
        }
        Ok(())
    };
    let out = match &op.kind {
        OpKind::IntConv {
            in_c,
            out_c,
            kh,
            kw,
            stride,
            pad,
            weight_bits,
            weights,
            ..
        } => {
            if weights.len() != out_c * in_c * kh * kw {
                return Err("weight count does not match geometry".into());
            }
            if *stride == 0 || !(2..=8).contains(weight_bits) {
                return Err("invalid stride or weight bitwidth".into());
            }
            let q = unsigned_max(*weight_bits);
            if weights.iter().any(|w| (*w as i64).abs() > q) {
                soft.push(format!("mapped weight outside [-{q}, {q}]"));
            }
            let mut shapes = Vec::new();
            for s in &x.shapes {
                if s[0] != *in_c || s[1] + 2 * pad < *kh || s[2] + 2 * pad < *kw {
                    return Err(format!("input {s:?} incompatible with conv"));
                }
                shapes.push([*out_c, (s[1] + 2 * pad - kh) / stride + 1, (s[2] + 2 * pad - kw) / stride + 1]);
            }
            let taps = in_c * kh * kw;
            let (mut pos_max, mut neg_max) = (0i64, 0i64);
            for o in 0..*out_c {
                let (mut pos, mut neg) = (0i64, 0i64);
                for &w in &weights[o * taps..(o + 1) * taps] {
                    // Zero padding widens the input range to include 0.
                    let (a, b) = (w as i64 * x.lo.min(0), w as i64 * x.hi.max(0));
                    pos = pos.saturating_add(a.max(b).max(0));
                    neg = neg.saturating_add(-(a.min(b).min(0)));
                }
                pos_max = pos_max.max(pos);
                neg_max = neg_max.max(neg);
            }
            (
                SlotInfo {
                    shapes,
                    lo: -neg_max,
                    hi: pos_max,
                    real: false,
                },
                pos_max.max(neg_max),
            )
        }
        OpKind::BnOffsetAdd { offsets, alpha } => {
            check_table(offsets.len(), "offset table")?;
            check_table(alpha.len(), "alpha table")?;
            check_channels(&offsets.iter().map(|r| r.len()).collect::<Vec<_>>(), "offset table")?;
            if alpha.iter().flatten().any(|a| !(a.is_finite() && *a > 0.0)) {
                soft.push("non-positive output scale".into());
            }
            let omin = offsets.iter().flatten().copied().min().unwrap_or(0);
            let omax = offsets.iter().flatten().copied().max().unwrap_or(0);
            let (lo, hi) = (x.lo.saturating_add(omin), x.hi.saturating_add(omax));
            (
                SlotInfo {
                    shapes: x.shapes.clone(),
                    lo,
                    hi,
                    real: false,
                },
                lo.abs().max(hi.abs()),
            )
        }
        OpKind::Requant { mult, bits, lo, hi, .. } => {
            check_table(mult.len(), "multiplier table")?;
            check_channels(&mult.iter().map(|r| r.len()).collect::<Vec<_>>(), "multiplier table")?;
            if !clip_matches_bits(*lo, *hi, *bits) {
                soft.push(format!("clip range [{lo}, {hi}] does not match {bits}-bit output"));
            }
            let mut bound = 0i64;
            let (mut olo, mut ohi) = (i64::MAX, i64::MIN);
            let amax = x.lo.abs().max(x.hi.abs());
            for m in mult.iter().flatten() {
                if m.c < 0 || m.d > D_LIMIT {
                    return Err(format!("invalid multiplier {m:?}"));
                }
                bound = bound.max(m.bound(amax));
                let (a, b) = mapped_range(x.lo, x.hi, m);
                olo = olo.min(a.clamp(*lo, *hi));
                ohi = ohi.max(b.clamp(*lo, *hi));
            }
            (
                SlotInfo {
                    shapes: x.shapes.clone(),
                    lo: olo.min(ohi),
                    hi: ohi,
                    real: false,
                },
                bound,
            )
        }
        OpKind::DyadicSkipAdd { channels, alpha } => {
            let y = ins[1];
            if x.shapes != y.shapes {
                return Err(format!("operand shapes differ: {:?} vs {:?}", x.shapes, y.shapes));
            }
            check_table(channels.len(), "skip table")?;
            check_table(alpha.len(), "alpha table")?;
            check_channels(&channels.iter().map(|r| r.len()).collect::<Vec<_>>(), "skip table")?;
            let mut bound = 0i64;
            let (mut olo, mut ohi) = (i64::MAX, i64::MIN);
            for ch in channels.iter().flatten() {
                if ch.scaled > 1 || ch.mult.c < 0 || ch.mult.d > D_LIMIT {
                    return Err(format!("invalid skip channel {ch:?}"));
                }
                let (s, u) = if ch.scaled == 0 { (x, y) } else { (y, x) };
                let (a, b) = mapped_range(s.lo, s.hi, &ch.mult);
                bound = bound.max(ch.mult.bound(s.lo.abs().max(s.hi.abs())));
                olo = olo.min(a + u.lo);
                ohi = ohi.max(b + u.hi);
            }
            bound = bound.max(olo.abs()).max(ohi.abs());
            (
                SlotInfo {
                    shapes: x.shapes.clone(),
                    lo: olo.min(ohi),
                    hi: ohi,
                    real: false,
                },
                bound,
            )
        }
        OpKind::IntMaxPool { kernel } => {
            let mut shapes = Vec::new();
            for s in &x.shapes {
                match kernel {
                    None => shapes.push([s[0], 1, 1]),
                    Some(k) if *k > 0 && s[1] % k == 0 && s[2] % k == 0 => shapes.push([s[0], s[1] / k, s[2] / k]),
                    Some(k) => return Err(format!("window {k} does not tile {s:?}")),
                }
            }
            (
                SlotInfo {
                    shapes,
                    lo: x.lo,
                    hi: x.hi,
                    real: false,
                },
                0,
            )
        }
        OpKind::IntUpsample => (
            SlotInfo {
                shapes: x.shapes.iter().map(|s| [s[0], 2 * s[1], 2 * s[2]]).collect(),
                lo: x.lo,
                hi: x.hi,
                real: false,
            },
            0,
        ),
        OpKind::PyramidGather => {
            if ins.iter().any(|s| s.shapes.len() != 1) {
                return Err("gather inputs must be single-level".into());
            }
            (
                SlotInfo {
                    shapes: ins.iter().map(|s| s.shapes[0]).collect(),
                    lo: ins.iter().map(|s| s.lo).min().unwrap(),
                    hi: ins.iter().map(|s| s.hi).max().unwrap(),
                    real: false,
                },
                0,
            )
        }
        OpKind::Dequant { alpha } => {
            check_table(alpha.len(), "alpha table")?;
            check_channels(&alpha.iter().map(|r| r.len()).collect::<Vec<_>>(), "alpha table")?;
            if i + 1 != p.ops.len() {
                soft.push("real-valued op before the end of the plan".into());
            }
            (
                SlotInfo {
                    shapes: x.shapes.clone(),
                    lo: x.lo,
                    hi: x.hi,
                    real: true,
                },
                0,
            )
        }
    };
    let (info, bound) = out;
    if bound > ACC_MAX || info.lo < i32::MIN as i64 || info.hi > ACC_MAX {
        soft.push(format!("worst-case magnitude {bound} exceeds the 32-bit accumulator"));
    }
    if nlev != 1 && nlev != levels {
        return Err(format!("value has {nlev} levels, plan has {levels}"));
    }
    Ok((info, bound, soft))
}

/// Full static check of `p`; never fails, problems are listed in the report.
pub fn validate_plan(p: &IntegerPlan) -> PlanReport {
    let (_, bounds, issues) = analyze(p);
    let max_accumulator = bounds.iter().copied().max().unwrap_or(0);
    PlanReport {
        valid: issues.is_empty(),
        ops: p.ops.len(),
        max_accumulator,
        op_bounds: bounds,
        issues,
    }
}
