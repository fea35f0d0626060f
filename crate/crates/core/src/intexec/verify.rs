use serde::{Deserialize, Serialize};

use super::exec::{exec_plan, quantize_input};
use super::reference::simulate_exact;
use crate::error::{Error, Result};
use crate::lowering::{lower_model, IntegerPlan, LowerConfig};
use crate::traingraph::{content_hash, forward, ForwardOptions, ModelGraph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Drift threshold as a fraction of the reference output range.
    pub drift_tol: f64,
    pub batch_size: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            drift_tol: 0.02,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub samples: usize,
    /// The plan's ops agree one-to-one with a fresh lowering of the checkpoint.
    pub structure_ok: bool,
    /// Every slot of the plan matches the exact reference bit for bit.
    pub exact: bool,
    pub first_mismatch_op: Option<usize>,
    pub first_mismatch_name: Option<String>,
    /// Output elements that differ from the reference.
    pub mismatched: u64,
    pub compared: u64,
    /// Absolute difference between dequantized outputs and the graph's eval outputs.
    pub max_drift: Option<f64>,
    pub mean_drift: Option<f64>,
    /// `max - min` of the graph's eval outputs.
    pub output_range: Option<f64>,
    pub drift_threshold: Option<f64>,
    pub drift_ok: bool,
    pub passed: bool,
}

impl VerifyReport {
    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("na".to_string(), |v| format!("{v:.6e}"));
        let mut s = String::new();
        s += &format!("passed={}\n", self.passed);
        s += &format!("samples={}\n", self.samples);
        s += &format!("structure_ok={}\n", self.structure_ok);
        s += &format!("exact={}\n", self.exact);
        s += &format!(
            "first_mismatch_op={}\n",
            self.first_mismatch_op.map_or("none".to_string(), |i| i.to_string())
        );
        s += &format!(
            "first_mismatch_name={}\n",
            self.first_mismatch_name.as_deref().unwrap_or("none")
        );
        s += &format!("mismatched={}\n", self.mismatched);
        s += &format!("compared={}\n", self.compared);
        s += &format!("max_drift={}\n", opt(self.max_drift));
        s += &format!("mean_drift={}\n", opt(self.mean_drift));
        s += &format!("output_range={}\n", opt(self.output_range));
        s += &format!("drift_threshold={}\n", opt(self.drift_threshold));
        s += &format!("drift_ok={}\n", self.drift_ok);
        s
    }
}

/// Checks `p` against the graph it claims to come from.
///
/// The graph is lowered again with the plan's settings and both plans are run
/// on the same quantized inputs: the given plan through the integer executor,
/// the fresh one through the exact reference. Any differing slot is a
/// mismatch. Drift compares the dequantized outputs with the graph's own eval
/// forward pass.
pub fn verify(p: &IntegerPlan, g: &ModelGraph, x: &Tensor, cfg: &VerifyConfig) -> Result<VerifyReport> {
    let hash = content_hash(g);
    if p.source_hash != hash {
        return Err(Error::Provenance {
            plan: p.source_hash.clone(),
            graph: hash,
        });
    }
    if cfg.batch_size == 0 || !(cfg.drift_tol.is_finite() && cfg.drift_tol >= 0.0) {
        return Err(Error::InvalidConfig("verify needs batch_size > 0 and drift_tol >= 0".into()));
    }
    let n = x.n();
    if n == 0 {
        return Err(Error::Empty("verification inputs".into()));
    }
    let reference = lower_model(
        g,
        &LowerConfig {
            d_max: p.d_max,
            mode: p.mode,
        },
    )?;
    let mut structure_ok = reference.ops.len() == p.ops.len();
    let mut first: Option<usize> = None;
    for (i, (a, b)) in p.ops.iter().zip(&reference.ops).enumerate() {
        if a.kind.name() != b.kind.name() || a.inputs != b.inputs {
            structure_ok = false;
            first = Some(i);
            break;
        }
    }
    if first.is_none() && !structure_ok {
        first = Some(p.ops.len().min(reference.ops.len()));
    }
    let compare_ops = first.unwrap_or(p.ops.len());
    let out_slot = compare_ops;

    let (mut mismatched, mut compared) = (0u64, 0u64);
    let (mut drift_sum, mut drift_max, mut drift_n) = (0.0, 0.0f64, 0u64);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut has_real = true;
    for start in (0..n).step_by(cfg.batch_size) {
        let xb = x.batch_slice(start, cfg.batch_size.min(n - start));
        let eta = quantize_input(p, &xb)?;
        let out = exec_plan(p, &eta, true)?;
        let slots = out.slots.as_ref().expect("slots kept");
        let exact = simulate_exact(&reference, &eta)?;
        for s in 1..=compare_ops {
            let same = slots[s].len() == exact[s].len() && exact[s].iter().zip(&slots[s]).all(|(r, t)| r.matches(t));
            if !same {
                first = Some(first.map_or(s - 1, |f| f.min(s - 1)));
                break;
            }
        }
        if out_slot > 0 {
            for (r, t) in exact[out_slot].iter().zip(&slots[out_slot]) {
                compared += t.data.len() as u64;
                if r.shape != t.shape {
                    mismatched += t.data.len() as u64;
                    continue;
                }
                mismatched += r.data.iter().zip(&t.data).filter(|(a, b)| **a != **b as i128).count() as u64;
            }
        }
        match &out.real {
            Some(real) => {
                let cache = forward(g, &xb, &ForwardOptions::eval())?;
                for (a, b) in real.iter().zip(cache.output()) {
                    if a.shape != b.shape {
                        return Err(Error::Shape(format!("plan output {:?} vs graph output {:?}", a.shape, b.shape)));
                    }
                    for (u, v) in a.data.iter().zip(&b.data) {
                        let d = (u - v).abs();
                        drift_sum += d;
                        drift_max = drift_max.max(d);
                        drift_n += 1;
                        lo = lo.min(*v);
                        hi = hi.max(*v);
                    }
                }
            }
            None => has_real = false,
        }
    }
    let exact = structure_ok && first.is_none() && mismatched == 0;
    let (max_drift, mean_drift, output_range, drift_threshold, drift_ok) = if has_real && drift_n > 0 {
        let mean = drift_sum / drift_n as f64;
        let range = hi - lo;
        let thr = cfg.drift_tol * range;
        (Some(drift_max), Some(mean), Some(range), Some(thr), mean <= thr)
    } else {
        (None, None, None, None, true)
    };
    Ok(VerifyReport {
        samples: n,
        structure_ok,
        exact,
        first_mismatch_op: first,
        first_mismatch_name: first.and_then(|i| p.ops.get(i)).map(|o| o.name.clone()),
        mismatched,
        compared,
        max_drift,
        mean_drift,
        output_range,
        drift_threshold,
        drift_ok,
        passed: exact && drift_ok,
    })
}
