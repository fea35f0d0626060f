use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{
    apply_bn_stats, backward, forward, BackwardOptions, ForwardOptions, Gradients, ModelGraph,
    QuantMode, Value,
};
use super::layers::{BatchNorm, Layer, ParamKind, GAMMA_MIN, NU_MIN};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::quantcore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_steps: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: QuantMode,
    pub nu_grad_scale: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_steps: Vec::new(),
            lr_decay: 0.1,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            mode: QuantMode::Fp,
            nu_grad_scale: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }
}

/// Images with one class label and one pyramid level per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Level whose head output is scored; all zero for a plain classifier.
    pub levels: Vec<usize>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, levels: Vec<usize>) -> Result<Self> {
        if labels.len() != images.n() || levels.len() != images.n() {
            return Err(Error::Shape(format!(
                "{} images, {} labels, {} levels",
                images.n(),
                labels.len(),
                levels.len()
            )));
        }
        Ok(Self {
            images,
            labels,
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.gather(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            levels: idx.iter().map(|&i| self.levels[i]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_loss_csv<W: Write>(records: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "epoch,split,loss,accuracy")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy)?;
    }
    Ok(())
}

/// Logits of sample `i` at its scored level.
fn logits(out: &Value, i: usize, level: usize) -> Result<&[f64]> {
    let t = out.get(level).or(if out.len() == 1 { out.first() } else { None }).ok_or(
        Error::LevelOutOfRange {
            level,
            levels: out.len(),
        },
    )?;
    let k = t.c() * t.plane();
    Ok(&t.data[i * k..(i + 1) * k])
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy, its gradient w.r.t. the output value and the
/// number of correct predictions.
pub fn cross_entropy(out: &Value, labels: &[usize], levels: &[usize]) -> Result<(f64, Value, usize)> {
    let n = labels.len();
    let mut grad: Value = out.iter().map(|t| Tensor::zeros(t.shape)).collect();
    let mut loss = 0.0;
    let mut correct = 0;
    for i in 0..n {
        let z = logits(out, i, levels[i])?;
        if labels[i] >= z.len() {
            return Err(Error::Shape(format!("label {} with {} classes", labels[i], z.len())));
        }
        let lp = log_softmax(z);
        loss -= lp[labels[i]];
        if argmax(z) == labels[i] {
            correct += 1;
        }
        let li = if out.len() == 1 { 0 } else { levels[i] };
        let k = z.len();
        let g = &mut grad[li].data[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = (lp[j].exp() - if j == labels[i] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad, correct))
}

/// Momentum buffers, one per parameter element.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: Option<Gradients>,
}

/// `v = m v + (g + wd p)` for weights, `v = m v + g` otherwise; `p -= lr v`.
/// Afterwards `gamma >= GAMMA_MIN` and `nu >= NU_MIN`.
pub fn sgd_step(g: &mut ModelGraph, grads: &Gradients, state: &mut SgdState, cfg: &TrainConfig) -> Result<()> {
    for (i, node) in g.nodes.iter().enumerate() {
        let params = node.layer.params();
        if grads.get(i).map(|g| g.len()) != Some(params.len())
            || params.iter().zip(&grads[i]).any(|((_, p), gr)| p.len() != gr.len())
        {
            return Err(Error::Shape(format!("gradient layout does not match node {i}")));
        }
        for (s, ((kind, _), gr)) in params.iter().zip(&grads[i]).enumerate() {
            if gr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    node: i,
                    name: format!("{kind:?}#{s}"),
                });
            }
        }
    }
    let velocity = state
        .velocity
        .get_or_insert_with(|| grads.iter().map(|n| n.iter().map(|p| vec![0.0; p.len()]).collect()).collect());
    for (i, node) in g.nodes.iter_mut().enumerate() {
        for (s, (kind, p)) in node.layer.params_mut().into_iter().enumerate() {
            let v = &mut velocity[i][s];
            let gr = &grads[i][s];
            let wd = if kind == ParamKind::Weight { cfg.weight_decay } else { 0.0 };
            for k in 0..p.len() {
                v[k] = cfg.momentum * v[k] + (gr[k] + wd * p[k]);
                p[k] -= cfg.lr * v[k];
                match kind {
                    ParamKind::Gamma => p[k] = p[k].max(GAMMA_MIN),
                    ParamKind::Nu => p[k] = p[k].max(NU_MIN),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.numel() == 0 {
        return Err(Error::Empty("no elements".into()));
    }
    let (c, plane) = (x.c(), x.plane());
    let count = (x.n() * plane) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in x.data.iter().enumerate() {
        mean[x.channel_of(i)] += v;
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for (i, v) in x.data.iter().enumerate() {
        let ch = x.channel_of(i);
        var[ch] += (v - mean[ch]) * (v - mean[ch]);
    }
    var.iter_mut().for_each(|v| *v /= count);
    Ok((mean, var))
}

/// EMA update of the running statistics of `bn`.
pub fn bn_update_stats(bn: &mut BatchNorm, mean: &[f64], var: &[f64]) -> Result<()> {
    if mean.is_empty() {
        return Err(Error::Empty("no batch statistics".into()));
    }
    if mean.len() != bn.channels || var.len() != bn.channels {
        return Err(Error::Shape(format!(
            "{} channels, got {} means and {} variances",
            bn.channels,
            mean.len(),
            var.len()
        )));
    }
    bn.update_stats(mean, var);
    Ok(())
}

fn batches(n: usize, size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).step_by(size).map(move |s| (s, size.min(n - s)))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Accuracy restricted to samples of each level (`NaN` for an absent level).
    pub per_level: Vec<f64>,
}

/// Eval-mode loss and accuracy.
pub fn evaluate(g: &ModelGraph, data: &Dataset, batch: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let mut hits = vec![0usize; g.levels];
    let mut totals = vec![0usize; g.levels];
    for (s, len) in batches(data.len(), batch.max(1)) {
        let idx: Vec<usize> = (s..s + len).collect();
        let sub = data.subset(&idx);
        let cache = forward(g, &sub.images, &ForwardOptions::eval())?;
        let (l, _, c) = cross_entropy(cache.output(), &sub.labels, &sub.levels)?;
        loss += l * len as f64;
        correct += c;
        for i in 0..len {
            let z = logits(cache.output(), i, sub.levels[i])?;
            let lv = sub.levels[i].min(g.levels - 1);
            totals[lv] += 1;
            if argmax(z) == sub.labels[i] {
                hits[lv] += 1;
            }
        }
    }
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        per_level: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
            .collect(),
    })
}

/// Trains `g` in place and returns per-epoch records. When `val` is given,
/// each epoch also records an eval-mode pass over it. Parameters are rounded
/// to `f32` at the end so the result equals its checkpoint.
pub fn train(g: &mut ModelGraph, data: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    g.validate()?;
    g.mode = cfg.mode;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::default();
    let bopts = BackwardOptions {
        nu_grad_scale: cfg.nu_grad_scale,
    };
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let step_cfg = TrainConfig {
            lr: cfg.lr_at(epoch),
            ..cfg.clone()
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (s, len) in batches(order.len(), cfg.batch_size) {
            let sub = data.subset(&order[s..s + len]);
            let cache = forward(g, &sub.images, &ForwardOptions::train())?;
            let (loss, dout, c) = cross_entropy(cache.output(), &sub.labels, &sub.levels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            loss_sum += loss * len as f64;
            correct += c;
            let grads = backward(g, &cache, dout, &bopts)?;
            sgd_step(g, &grads, &mut state, &step_cfg)?;
            apply_bn_stats(g, &cache)?;
        }
        records.push(EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
        if let Some(val) = val {
            let ev = evaluate(g, val, 256)?;
            records.push(EpochRecord {
                epoch,
                split: "val".into(),
                loss: ev.loss,
                accuracy: ev.accuracy,
            });
        }
    }
    g.snap_to_f32();
    Ok(records)
}

impl ModelGraph {
    /// Copy in QAT mode with every non-boundary quantizer set to `bits`.
    pub fn with_bits(&self, bits: u32) -> Result<ModelGraph> {
        quantcore::check_bits(bits)?;
        let mut g = self.clone();
        g.mode = QuantMode::Qat;
        for node in &mut g.nodes {
            match &mut node.layer {
                Layer::Quant { q, boundary } if !*boundary => q.bits = bits,
                Layer::Conv2d(c) if !c.boundary => c.wq.bits = bits,
                Layer::Linear(l) if !l.boundary => l.wq.bits = bits,
                _ => {}
            }
        }
        Ok(g)
    }
}

fn same_architecture(a: &ModelGraph, b: &ModelGraph) -> bool {
    a.levels == b.levels
        && a.nodes.len() == b.nodes.len()
        && a.nodes.iter().zip(&b.nodes).all(|(x, y)| {
            x.inputs == y.inputs
                && x.layer.kind_name() == y.layer.kind_name()
                && x.layer.blob_lens() == y.layer.blob_lens()
                && match (&x.layer, &y.layer) {
                    (Layer::Conv2d(p), Layer::Conv2d(q)) => {
                        (p.kernel, p.stride, p.padding) == (q.kernel, q.stride, q.padding)
                    }
                    (Layer::Linear(p), Layer::Linear(q)) => p.in_shape == q.in_shape,
                    (Layer::MaxPool { kernel: p }, Layer::MaxPool { kernel: q }) => p == q,
                    (Layer::Input { shape: p }, Layer::Input { shape: q }) => p == q,
                    _ => true,
                }
        })
}

/// Builds the QAT graph `template` from a full-precision graph with the same
/// architecture: weights and BN state are copied, weight intervals are
/// initialized from the weights and activation intervals from one eval-mode
/// pass of `fp` over `calib`.
pub fn init_quantized_from_fp(template: &ModelGraph, fp: &ModelGraph, calib: &Tensor) -> Result<ModelGraph> {
    if !same_architecture(template, fp) {
        return Err(Error::ArchitectureMismatch(
            "checkpoint layers differ from the target architecture".into(),
        ));
    }
    let mut g = template.clone();
    g.mode = QuantMode::Qat;
    for (dst, src) in g.nodes.iter_mut().zip(&fp.nodes) {
        for (d, s) in dst.layer.blob_arrays_mut().into_iter().zip(src.layer.blob_arrays()) {
            d.clear();
            d.extend_from_slice(s);
        }
    }
    let mut fp_mode = fp.clone();
    fp_mode.mode = QuantMode::Fp;
    let cache = forward(&fp_mode, calib, &ForwardOptions::eval())?;
    for i in 0..g.nodes.len() {
        let collect = || -> Vec<f64> {
            cache
                .input_of(&fp_mode, i)
                .iter()
                .flat_map(|t| t.data.iter().copied())
                .collect()
        };
        match &mut g.nodes[i].layer {
            Layer::Conv2d(c) => c.wq.nu = quantcore::init_weight_nu(&c.weights, c.wq.bits).max(NU_MIN),
            Layer::Linear(l) => l.wq.nu = quantcore::init_weight_nu(&l.weights, l.wq.bits).max(NU_MIN),
            Layer::Quant { q, .. } => q.nu = quantcore::init_act_nu(&collect(), q.bits).max(NU_MIN),
            Layer::OutputQuant { q } => {
                q.nu = collect().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(NU_MIN)
            }
            _ => {}
        }
    }
    g.validate()?;
    Ok(g)
}
