//! Central finite-difference check of [`backward`] against the loss.
//!
//! The fake-quantized loss is piecewise constant in every rounded input, so
//! differences are taken on the frozen-rounding surrogate: each rounding
//! residual is captured at the base point and held fixed, which leaves the
//! surrogate equal to the real loss at the base point and smooth away from
//! clip, ReLU and max-pool kinks. A coordinate is skipped when either probe
//! changes the kink signature.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{backward, forward, BackwardOptions, ForwardOptions, ModelGraph};
use super::layers::ParamKind;
use super::tensor::Tensor;
use super::train::cross_entropy;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Gradients below this magnitude are compared absolutely.
    pub abs_floor: f64,
    /// Coordinates sampled per parameter array (all when the array is smaller).
    pub per_array: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-8,
            per_array: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub node: usize,
    pub kind: ParamKind,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    /// Coordinates whose probes crossed a kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn pass_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.passed).count() as f64 / self.samples.len() as f64
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.samples.iter().filter(|s| s.kind == kind).count()
    }
}

/// Train-mode cross-entropy gradient check over sampled parameter coordinates.
pub fn gradient_check(
    g: &ModelGraph,
    x: &Tensor,
    labels: &[usize],
    levels: &[usize],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let base = forward(g, x, &ForwardOptions::train())?;
    let residuals = base.residuals();
    let signature = base.kink_signature(g);
    let (_, dout, _) = cross_entropy(base.output(), labels, levels)?;
    let grads = backward(g, &base, dout, &BackwardOptions { nu_grad_scale: false })?;

    let frozen = ForwardOptions {
        train: true,
        level: None,
        frozen: Some(&residuals),
    };
    let probe = |g: &ModelGraph| -> Result<(f64, u64)> {
        let c = forward(g, x, &frozen)?;
        Ok((cross_entropy(c.output(), labels, levels)?.0, c.kink_signature(g)))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut work = g.clone();
    for node in 0..g.nodes.len() {
        let params = g.nodes[node].layer.params();
        for (slot, (kind, p)) in params.iter().enumerate() {
            let picks = sample(&mut rng, p.len(), cfg.per_array.min(p.len())).into_vec();
            for k in picks {
                let orig = p[k];
                let mut eval_at = |v: f64| -> Result<(f64, u64)> {
                    work.nodes[node].layer.params_mut()[slot].1[k] = v;
                    let r = probe(&work);
                    work.nodes[node].layer.params_mut()[slot].1[k] = orig;
                    r
                };
                let (lp, sp) = eval_at(orig + cfg.step)?;
                let (lm, sm) = eval_at(orig - cfg.step)?;
                if sp != signature || sm != signature {
                    report.skipped += 1;
                    continue;
                }
                let numeric = (lp - lm) / (2.0 * cfg.step);
                let analytic = grads[node][slot][k];
                let scale = analytic.abs().max(numeric.abs());
                let passed = (analytic - numeric).abs() <= cfg.rel_tol * scale || scale < cfg.abs_floor;
                report.samples.push(GradSample {
                    node,
                    kind: *kind,
                    index: k,
                    analytic,
                    numeric,
                    passed,
                });
            }
        }
    }
    Ok(report)
}
