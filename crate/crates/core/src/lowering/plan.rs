//! Integer plan IR and its file format.
//!
//! Slot 0 holds the 8-bit quantized input; op `i` writes slot `i + 1` and
//! reads the slots listed in [`Op::inputs`]. A slot holds one integer tensor
//! per pyramid level. Per-level parameter tables hold either one entry shared
//! by every level or one entry per level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dyadic::{DyadicRational, LowerMode};
use crate::error::{Error, Result};
use crate::quantcore::ActQuantizer;

pub const PLAN_MAGIC: &str = "intq-plan";
pub const PLAN_VERSION: u32 = 1;

/// Per-channel skip fusion parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipChannel {
    /// Operand (0 or 1) multiplied by `mult`; the other passes through.
    pub scaled: u8,
    pub mult: DyadicRational,
    /// `|ratio - c/2^d|` recorded at lowering.
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OpKind {
    /// Integer convolution with mapped weights `2 eta_w - (2^b - 1)`.
    IntConv {
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        weight_bits: u32,
        /// `(out_c, in_c, kh, kw)`.
        weights: Vec<i32>,
        /// Scale of the accumulator, metadata only.
        alpha: f64,
    },
    /// `eta + offset[c]` per level.
    BnOffsetAdd {
        offsets: Vec<Vec<i64>>,
        /// Output scale per level and channel, metadata only.
        alpha: Vec<Vec<f64>>,
    },
    /// `clip((eta * c + 2^(d-1)) >> d, lo, hi)` per level and channel.
    Requant {
        mult: Vec<Vec<DyadicRational>>,
        bits: u32,
        lo: i64,
        hi: i64,
        /// Output grid step, metadata only.
        alpha: f64,
    },
    /// `unscaled + ((scaled * c + 2^(d-1)) >> d)` per level and channel.
    DyadicSkipAdd {
        channels: Vec<Vec<SkipChannel>>,
        /// Surviving scale per level and channel, metadata only.
        alpha: Vec<Vec<f64>>,
    },
    /// `Some(k)`: `k x k` window, stride `k`; `None`: global.
    IntMaxPool { kernel: Option<usize> },
    /// Nearest-neighbour x2.
    IntUpsample,
    /// Concatenates single-level slots into one multi-level slot.
    PyramidGather,
    /// Terminal `eta * alpha` per level and channel; the only real-valued op.
    Dequant { alpha: Vec<Vec<f64>> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::IntConv { .. } => "int_conv",
            OpKind::BnOffsetAdd { .. } => "bn_offset_add",
            OpKind::Requant { .. } => "requant",
            OpKind::DyadicSkipAdd { .. } => "dyadic_skip_add",
            OpKind::IntMaxPool { .. } => "int_max_pool",
            OpKind::IntUpsample => "int_upsample",
            OpKind::PyramidGather => "pyramid_gather",
            OpKind::Dequant { .. } => "dequant",
        }
    }

    pub fn arity(&self, levels: usize) -> usize {
        match self {
            OpKind::DyadicSkipAdd { .. } => 2,
            OpKind::PyramidGather => levels,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Op {
    /// Source graph node, for diagnostics.
    pub name: String,
    pub inputs: Vec<usize>,
    #[serde(flatten)]
    pub kind: OpKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegerPlan {
    pub format_version: u32,
    /// Content hash of the graph the plan was lowered from.
    pub source_hash: String,
    pub input_shape: [usize; 3],
    /// Quantizer producing slot 0 from real inputs.
    pub input_quant: ActQuantizer,
    pub levels: usize,
    /// Bitwidth of non-boundary layers.
    pub bits: u32,
    pub mode: LowerMode,
    pub d_max: u32,
    pub ops: Vec<Op>,
    /// Resolved configuration of the run that wrote the plan.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
}

/// Entry `level` of a per-level table with one shared or one-per-level rows.
pub fn per_level<T>(table: &[T], level: usize) -> &T {
    if table.len() == 1 {
        &table[0]
    } else {
        &table[level]
    }
}

impl IntegerPlan {
    pub fn empty(input_shape: [usize; 3], input_quant: ActQuantizer) -> Self {
        Self {
            format_version: PLAN_VERSION,
            source_hash: String::new(),
            input_shape,
            input_quant,
            levels: 1,
            bits: 8,
            mode: LowerMode::Aqd,
            d_max: super::dyadic::DEFAULT_D_MAX,
            ops: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    /// Slot read as the plan output: the last op's slot, or the input for an empty plan.
    pub fn output_slot(&self) -> usize {
        self.ops.len()
    }

    pub fn to_text(&self) -> String {
        format!(
            "{PLAN_MAGIC}\n{}\n",
            serde_json::to_string_pretty(self).expect("plan serializes")
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let what = "plan";
        let body = text
            .strip_prefix(PLAN_MAGIC)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or_else(|| Error::format(what, "bad magic line"))?;
        let raw: serde_json::Value = serde_json::from_str(body).map_err(|e| Error::format(what, e.to_string()))?;
        let found = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(what, "no format_version"))? as u32;
        if found != PLAN_VERSION {
            return Err(Error::VersionMismatch {
                what: what.into(),
                found,
                expected: PLAN_VERSION,
            });
        }
        serde_json::from_value(raw).map_err(|e| Error::format(what, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}
