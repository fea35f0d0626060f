//! Model graph, forward pass with fake quantization, and hand-written backward.
//!
//! Every edge carries a [`Value`]: one tensor for ordinary layers, or one
//! tensor per pyramid level after a [`Layer::Pyramid`] node. Layers downstream
//! of a pyramid run once per level with shared weights. A shared
//! [`Layer::BatchNorm`] pools its batch statistics over all levels of the value
//! it receives; a [`Layer::MultiLevelBn`] normalizes level `l` with its own
//! statistics and affine parameters.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Conv2d, Layer, Linear, ParamKind};
use super::tensor::{self, ConvGeom, Tensor};
use crate::error::{Error, Result};
use crate::quantcore::{self, QuantPoint, Region};

pub type Value = Vec<Tensor>;

/// Per-level `(C, H, W)` shapes of a value.
pub type ValueShape = Vec<[usize; 3]>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    /// Full precision: quantizers are pass-through.
    Fp,
    /// Fake quantization on weights and activations.
    Qat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGraph {
    pub nodes: Vec<Node>,
    /// Number of pyramid levels, 1 for a plain network.
    pub levels: usize,
    pub mode: QuantMode,
}

impl ModelGraph {
    pub fn new(levels: usize, mode: QuantMode) -> Self {
        Self {
            nodes: Vec::new(),
            levels,
            mode,
        }
    }

    /// Appends a node and returns its index.
    pub fn add(&mut self, name: impl Into<String>, layer: Layer, inputs: &[usize]) -> usize {
        self.nodes.push(Node {
            name: name.into(),
            layer,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn input_shape(&self) -> Result<[usize; 3]> {
        match self.nodes.first().map(|n| &n.layer) {
            Some(Layer::Input { shape }) => Ok(*shape),
            _ => Err(Error::InvalidGraph("node 0 must be the input".into())),
        }
    }

    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.layer.params())
            .map(|(_, p)| p.len())
            .sum()
    }

    /// Consumers of each node, in increasing index order.
    pub fn consumers(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &p in &n.inputs {
                out[p].push(i);
            }
        }
        out
    }

    /// Type-checks the graph and returns the value shape of every node.
    pub fn validate(&self) -> Result<Vec<ValueShape>> {
        if self.levels == 0 {
            return Err(Error::InvalidGraph("levels must be at least 1".into()));
        }
        let mut shapes: Vec<ValueShape> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let bad = |msg: String| Error::InvalidGraph(format!("node {i} ({}): {msg}", node.name));
            if let Some(&p) = node.inputs.iter().find(|&&p| p >= i) {
                return Err(bad(format!("input {p} does not precede the node")));
            }
            let arity = match &node.layer {
                Layer::Input { .. } => 0,
                Layer::SkipAdd => 2,
                Layer::Pyramid => self.levels,
                _ => 1,
            };
            if node.inputs.len() != arity {
                return Err(bad(format!("expects {arity} inputs, has {}", node.inputs.len())));
            }
            let input = node.inputs.first().map(|&p| shapes[p].clone());
            let shape: ValueShape = match &node.layer {
                Layer::Input { shape } => {
                    if i != 0 {
                        return Err(bad("input must be node 0".into()));
                    }
                    vec![*shape]
                }
                Layer::Quant { .. }
                | Layer::OutputQuant { .. }
                | Layer::Relu => input.unwrap(),
                Layer::Conv2d(c) => {
                    let g = conv_geom(c);
                    let mut out = Vec::new();
                    for s in input.unwrap() {
                        if s[0] != c.in_c || s[1] + 2 * c.padding < c.kernel || s[2] + 2 * c.padding < c.kernel {
                            return Err(bad(format!("input {s:?} incompatible with conv")));
                        }
                        if c.weights.len() != c.out_c * g.taps() {
                            return Err(bad("weight count does not match geometry".into()));
                        }
                        let (oh, ow) = g.out_hw(s[1], s[2]);
                        out.push([c.out_c, oh, ow]);
                    }
                    out
                }
                Layer::Linear(l) => {
                    let mut out = Vec::new();
                    for s in input.unwrap() {
                        if s != l.in_shape {
                            return Err(bad(format!("input {s:?} != declared {:?}", l.in_shape)));
                        }
                        out.push([l.out_features, 1, 1]);
                    }
                    out
                }
                Layer::BatchNorm(bn) => {
                    let s = input.unwrap();
                    if s.iter().any(|s| s[0] != bn.channels) {
                        return Err(bad("channel count mismatch".into()));
                    }
                    s
                }
                Layer::MultiLevelBn(ml) => {
                    let s = input.unwrap();
                    if ml.levels.len() != self.levels {
                        return Err(bad(format!(
                            "{} private BNs for {} levels",
                            ml.levels.len(),
                            self.levels
                        )));
                    }
                    if s.len() != 1 && s.len() != self.levels {
                        return Err(bad("value is neither single nor pyramid".into()));
                    }
                    if ml.levels.iter().any(|bn| s.iter().any(|s| s[0] != bn.channels)) {
                        return Err(bad("channel count mismatch".into()));
                    }
                    s
                }
                Layer::MaxPool { kernel } => {
                    let mut out = Vec::new();
                    for s in input.unwrap() {
                        match kernel {
                            None => out.push([s[0], 1, 1]),
                            Some(k) => {
                                if *k == 0 || s[1] % k != 0 || s[2] % k != 0 {
                                    return Err(bad(format!("window {k} does not tile {s:?}")));
                                }
                                out.push([s[0], s[1] / k, s[2] / k]);
                            }
                        }
                    }
                    out
                }
                Layer::Upsample => input
                    .unwrap()
                    .into_iter()
                    .map(|s| [s[0], 2 * s[1], 2 * s[2]])
                    .collect(),
                Layer::SkipAdd => {
                    let a = &shapes[node.inputs[0]];
                    let b = &shapes[node.inputs[1]];
                    if a != b {
                        return Err(bad(format!("operand shapes differ: {a:?} vs {b:?}")));
                    }
                    a.clone()
                }
                Layer::Pyramid => {
                    let mut out = Vec::new();
                    for &p in &node.inputs {
                        if shapes[p].len() != 1 {
                            return Err(bad("pyramid inputs must be single-level".into()));
                        }
                        out.push(shapes[p][0]);
                    }
                    out
                }
            };
            shapes.push(shape);
        }
        if shapes.is_empty() {
            return Err(Error::InvalidGraph("empty graph".into()));
        }
        Ok(shapes)
    }

    /// He-normal initialization of conv/linear weights from `seed`; BN reset to identity.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for node in &mut self.nodes {
            match &mut node.layer {
                Layer::Conv2d(c) => {
                    let fan_in = (c.in_c * c.kernel * c.kernel) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
                    for w in &mut c.weights {
                        *w = normal.sample(&mut rng);
                    }
                }
                Layer::Linear(l) => {
                    let normal = Normal::new(0.0, (2.0 / l.in_features() as f64).sqrt()).unwrap();
                    for w in &mut l.weights {
                        *w = normal.sample(&mut rng);
                    }
                }
                Layer::BatchNorm(bn) => *bn = fresh_bn(bn),
                Layer::MultiLevelBn(ml) => {
                    for bn in &mut ml.levels {
                        *bn = fresh_bn(bn);
                    }
                }
                _ => {}
            }
        }
    }

    /// Rounds every stored real to `f32`, the checkpoint precision.
    pub fn snap_to_f32(&mut self) {
        for node in &mut self.nodes {
            for arr in node.layer.blob_arrays_mut() {
                for v in arr.iter_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

fn fresh_bn(bn: &BatchNorm) -> BatchNorm {
    BatchNorm {
        eps: bn.eps,
        momentum: bn.momentum,
        ..BatchNorm::new(bn.channels)
    }
}

pub fn conv_geom(c: &Conv2d) -> ConvGeom {
    ConvGeom {
        in_c: c.in_c,
        out_c: c.out_c,
        kh: c.kernel,
        kw: c.kernel,
        stride: c.stride,
        pad: c.padding,
    }
}

pub fn linear_geom(l: &Linear) -> ConvGeom {
    ConvGeom {
        in_c: l.in_shape[0],
        out_c: l.out_features,
        kh: l.in_shape[1],
        kw: l.in_shape[2],
        stride: 1,
        pad: 0,
    }
}

/// Rounding residuals captured by a forward pass, indexed `[node][level][element]`.
/// Conv/linear weight residuals are stored under level 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Residuals {
    pub nodes: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// Batch statistics in BN (training) versus running statistics (eval).
    pub train: bool,
    /// Active level for a [`Layer::MultiLevelBn`] that receives a single-level value.
    pub level: Option<usize>,
    /// Replace rounding by previously captured residuals.
    pub frozen: Option<&'a Residuals>,
}

impl ForwardOptions<'_> {
    pub fn train() -> Self {
        Self {
            train: true,
            ..Default::default()
        }
    }

    pub fn eval() -> Self {
        Self::default()
    }
}

/// Statistics of one normalization group (one BN parameter set).
#[derive(Clone, Debug)]
pub struct BnGroup {
    /// Index into [`Layer::MultiLevelBn::levels`], 0 for a shared BN.
    pub param: usize,
    /// Which elements of the value this group normalizes.
    pub members: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    inv_std: Vec<f64>,
    xhat: Vec<Tensor>,
}

#[derive(Clone, Debug)]
enum NodeCache {
    None,
    Points(Vec<Vec<QuantPoint>>),
    Conv { wbar: Vec<f64>, points: Vec<QuantPoint> },
    Bn(Vec<BnGroup>),
    Pool(Vec<Vec<u32>>),
}

/// Activations and per-layer state recorded by [`forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub outputs: Vec<Value>,
    caches: Vec<NodeCache>,
    pub train: bool,
}

impl ForwardCache {
    pub fn output(&self) -> &Value {
        self.outputs.last().expect("non-empty graph")
    }

    /// Input value of node `i` (its first operand).
    pub fn input_of<'a>(&'a self, g: &ModelGraph, i: usize) -> &'a Value {
        &self.outputs[g.nodes[i].inputs[0]]
    }

    /// Rounding residuals of every quantizer, for surrogate replays.
    pub fn residuals(&self) -> Residuals {
        Residuals {
            nodes: self
                .caches
                .iter()
                .map(|c| match c {
                    NodeCache::Points(levels) => levels
                        .iter()
                        .map(|pts| pts.iter().map(|p| p.residual).collect())
                        .collect(),
                    NodeCache::Conv { points, .. } => {
                        vec![points.iter().map(|p| p.residual).collect()]
                    }
                    _ => Vec::new(),
                })
                .collect(),
        }
    }

    /// Batch statistics per BN node: `(node, groups)`.
    pub fn bn_groups(&self) -> Vec<(usize, &[BnGroup])> {
        self.caches
            .iter()
            .enumerate()
            .filter_map(|(i, c)| match c {
                NodeCache::Bn(groups) => Some((i, &groups[..])),
                _ => None,
            })
            .collect()
    }

    /// Hash of every piecewise decision in the pass: clip regions, ReLU
    /// masks and max-pool selections. Two passes with equal signatures lie on
    /// the same smooth piece of the loss.
    pub fn kink_signature(&self, g: &ModelGraph) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, c) in self.caches.iter().enumerate() {
            match c {
                NodeCache::Points(levels) => {
                    for p in levels.iter().flatten() {
                        (p.region as u8).hash(&mut h);
                    }
                }
                NodeCache::Conv { points, .. } => {
                    for p in points {
                        (p.region as u8).hash(&mut h);
                    }
                }
                NodeCache::Pool(args) => args.hash(&mut h),
                _ => {}
            }
            if matches!(g.nodes[i].layer, Layer::Relu) {
                for t in &self.outputs[i] {
                    for v in &t.data {
                        (*v > 0.0).hash(&mut h);
                    }
                }
            }
        }
        h.finish()
    }
}

fn quantize_tensor<F>(x: &Tensor, frozen: Option<&Vec<f64>>, point: F) -> (Tensor, Vec<QuantPoint>)
where
    F: Fn(f64, Option<f64>) -> QuantPoint,
{
    let pts: Vec<QuantPoint> = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| point(v, frozen.map(|r| r[i])))
        .collect();
    let out = Tensor {
        shape: x.shape,
        data: pts.iter().map(|p| p.value).collect(),
    };
    (out, pts)
}

fn frozen_for<'a>(opts: &ForwardOptions<'a>, node: usize, level: usize) -> Result<Option<&'a Vec<f64>>> {
    match opts.frozen {
        None => Ok(None),
        Some(r) => r
            .nodes
            .get(node)
            .and_then(|l| l.get(level))
            .map(Some)
            .ok_or_else(|| Error::MissingCache(format!("no frozen residuals for node {node}"))),
    }
}

fn bn_group_forward(bn: &BatchNorm, xs: &[&Tensor], train: bool) -> (Vec<Tensor>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<Tensor>) {
    let c_count = bn.channels;
    let (mean, var) = if train {
        let mut sum = vec![0.0; c_count];
        let mut count = 0usize;
        for x in xs {
            let plane = x.plane();
            for n in 0..x.n() {
                for c in 0..c_count {
                    let off = (n * c_count + c) * plane;
                    sum[c] += x.data[off..off + plane].iter().sum::<f64>();
                }
            }
            count += x.n() * plane;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; c_count];
        for x in xs {
            let plane = x.plane();
            for n in 0..x.n() {
                for c in 0..c_count {
                    let off = (n * c_count + c) * plane;
                    sq[c] += x.data[off..off + plane]
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
            }
        }
        let var = sq.iter().map(|s| s / count as f64).collect();
        (mean, var)
    } else {
        (bn.running_mean.clone(), bn.running_var.clone())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut outs = Vec::with_capacity(xs.len());
    let mut xhats = Vec::with_capacity(xs.len());
    for x in xs {
        let mut xhat = Tensor::zeros(x.shape);
        let mut out = Tensor::zeros(x.shape);
        for (i, &v) in x.data.iter().enumerate() {
            let c = x.channel_of(i);
            let h = (v - mean[c]) * inv_std[c];
            xhat.data[i] = h;
            out.data[i] = h * bn.gamma[c] + bn.beta[c];
        }
        outs.push(out);
        xhats.push(xhat);
    }
    (outs, mean, var, inv_std, xhats)
}

/// Forward pass. Outputs are deterministic in `(g, x, opts)`.
pub fn forward(g: &ModelGraph, x: &Tensor, opts: &ForwardOptions) -> Result<ForwardCache> {
    let qat = g.mode == QuantMode::Qat;
    let mut outputs: Vec<Value> = Vec::with_capacity(g.nodes.len());
    let mut caches = Vec::with_capacity(g.nodes.len());
    if let Some(level) = opts.level {
        if level >= g.levels {
            return Err(Error::LevelOutOfRange {
                level,
                levels: g.levels,
            });
        }
    }
    for (i, node) in g.nodes.iter().enumerate() {
        let input = node.inputs.first().map(|&p| &outputs[p]);
        let (value, cache): (Value, NodeCache) = match &node.layer {
            Layer::Input { shape } => {
                if x.shape[1..] != shape[..] {
                    return Err(Error::Shape(format!(
                        "input {:?} does not match model input {shape:?}",
                        x.shape
                    )));
                }
                (vec![x.clone()], NodeCache::None)
            }
            Layer::Quant { q, .. } => {
                let input: &Value = input.unwrap();
                if !qat {
                    (input.clone(), NodeCache::None)
                } else {
                    let mut vals = Vec::new();
                    let mut pts = Vec::new();
                    for (l, t) in input.iter().enumerate() {
                        let (v, p) = quantize_tensor(t, frozen_for(opts, i, l)?, |x, r| q.point(x, r));
                        vals.push(v);
                        pts.push(p);
                    }
                    (vals, NodeCache::Points(pts))
                }
            }
            Layer::OutputQuant { q } => {
                let input: &Value = input.unwrap();
                if !qat {
                    (input.clone(), NodeCache::None)
                } else {
                    let mut vals = Vec::new();
                    let mut pts = Vec::new();
                    for (l, t) in input.iter().enumerate() {
                        let (v, p) = quantize_tensor(t, frozen_for(opts, i, l)?, |x, r| q.point(x, r));
                        vals.push(v);
                        pts.push(p);
                    }
                    (vals, NodeCache::Points(pts))
                }
            }
            Layer::Conv2d(_) | Layer::Linear(_) => {
                let (weights, wq, geom) = match &node.layer {
                    Layer::Conv2d(c) => (&c.weights, c.wq, conv_geom(c)),
                    Layer::Linear(l) => (&l.weights, l.wq, linear_geom(l)),
                    _ => unreachable!(),
                };
                let (wbar, points) = if qat {
                    let frozen = frozen_for(opts, i, 0)?;
                    let pts: Vec<QuantPoint> = weights
                        .iter()
                        .enumerate()
                        .map(|(k, &w)| wq.point(w, frozen.map(|r| r[k])))
                        .collect();
                    (pts.iter().map(|p| p.value).collect(), pts)
                } else {
                    (weights.clone(), Vec::new())
                };
                let mut vals = Vec::new();
                for t in input.unwrap() {
                    vals.push(tensor::conv2d_forward(t, &wbar, &geom)?);
                }
                (vals, NodeCache::Conv { wbar, points })
            }
            Layer::BatchNorm(bn) => {
                let input: &Value = input.unwrap();
                let refs: Vec<&Tensor> = input.iter().collect();
                let (outs, mean, var, inv_std, xhat) = bn_group_forward(bn, &refs, opts.train);
                let group = BnGroup {
                    param: 0,
                    members: (0..input.len()).collect(),
                    mean,
                    var,
                    inv_std,
                    xhat,
                };
                (outs, NodeCache::Bn(vec![group]))
            }
            Layer::MultiLevelBn(ml) => {
                let input: &Value = input.unwrap();
                let mut outs = Vec::new();
                let mut groups = Vec::new();
                for (l, t) in input.iter().enumerate() {
                    let param = if input.len() == 1 {
                        match opts.level {
                            Some(level) => level,
                            None if g.levels == 1 => 0,
                            None => {
                                return Err(Error::InvalidGraph(format!(
                                    "node {i} ({}): single-level value needs an active level",
                                    node.name
                                )))
                            }
                        }
                    } else {
                        l
                    };
                    let (mut o, mean, var, inv_std, xhat) =
                        bn_group_forward(&ml.levels[param], &[t], opts.train);
                    outs.push(o.remove(0));
                    groups.push(BnGroup {
                        param,
                        members: vec![l],
                        mean,
                        var,
                        inv_std,
                        xhat,
                    });
                }
                (outs, NodeCache::Bn(groups))
            }
            Layer::Relu => {
                let vals = input
                    .unwrap()
                    .iter()
                    .map(|t| Tensor {
                        shape: t.shape,
                        data: t.data.iter().map(|v| v.max(0.0)).collect(),
                    })
                    .collect();
                (vals, NodeCache::None)
            }
            Layer::MaxPool { kernel } => {
                let mut vals = Vec::new();
                let mut args = Vec::new();
                for t in input.unwrap() {
                    let (v, a) = tensor::maxpool_forward(t, *kernel)?;
                    vals.push(v);
                    args.push(a);
                }
                (vals, NodeCache::Pool(args))
            }
            Layer::Upsample => (
                input.unwrap().iter().map(tensor::upsample_forward).collect(),
                NodeCache::None,
            ),
            Layer::SkipAdd => {
                let a = &outputs[node.inputs[0]];
                let b = &outputs[node.inputs[1]];
                if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape != y.shape) {
                    return Err(Error::Shape(format!("skip operands differ at node {i}")));
                }
                let vals = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let mut s = x.clone();
                        s.add_assign(y);
                        s
                    })
                    .collect();
                (vals, NodeCache::None)
            }
            Layer::Pyramid => (
                node.inputs.iter().map(|&p| outputs[p][0].clone()).collect(),
                NodeCache::None,
            ),
        };
        outputs.push(value);
        caches.push(cache);
    }
    Ok(ForwardCache {
        outputs,
        caches,
        train: opts.train,
    })
}

/// Applies the EMA update for every BN parameter set that saw batch statistics.
pub fn apply_bn_stats(g: &mut ModelGraph, cache: &ForwardCache) -> Result<()> {
    if !cache.train {
        return Ok(());
    }
    for (i, groups) in cache.bn_groups() {
        for grp in groups {
            match &mut g.nodes[i].layer {
                Layer::BatchNorm(bn) => bn.update_stats(&grp.mean, &grp.var),
                Layer::MultiLevelBn(ml) => ml.levels[grp.param].update_stats(&grp.mean, &grp.var),
                _ => return Err(Error::MissingCache(format!("node {i} is not a BN"))),
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct BackwardOptions {
    /// Multiply interval gradients by `1/sqrt(N (2^b - 1))`.
    pub nu_grad_scale: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self { nu_grad_scale: true }
    }
}

/// Gradients indexed `[node][param slot][element]` in [`Layer::params`] order.
pub type Gradients = Vec<Vec<Vec<f64>>>;

fn zero_grads(g: &ModelGraph) -> Gradients {
    g.nodes
        .iter()
        .map(|n| n.layer.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect())
        .collect()
}

fn accumulate(slot: &mut Option<Value>, grad: Value) {
    match slot {
        None => *slot = Some(grad),
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(&grad) {
                a.add_assign(g);
            }
        }
    }
}

fn per_sample_numel(v: &Value) -> usize {
    v.iter().map(|t| t.numel() / t.n().max(1)).sum()
}

/// Backward pass from `out_grad` (gradient w.r.t. the graph output).
pub fn backward(
    g: &ModelGraph,
    cache: &ForwardCache,
    out_grad: Value,
    opts: &BackwardOptions,
) -> Result<Gradients> {
    if cache.outputs.len() != g.nodes.len() || cache.caches.len() != g.nodes.len() {
        return Err(Error::MissingCache(format!(
            "cache has {} nodes, graph has {}",
            cache.outputs.len(),
            g.nodes.len()
        )));
    }
    let qat = g.mode == QuantMode::Qat;
    let mut grads = zero_grads(g);
    let mut flow: Vec<Option<Value>> = vec![None; g.nodes.len()];
    let out = g.output();
    if out_grad.len() != cache.outputs[out].len()
        || out_grad.iter().zip(&cache.outputs[out]).any(|(a, b)| a.shape != b.shape)
    {
        return Err(Error::Shape("output gradient does not match output".into()));
    }
    flow[out] = Some(out_grad);

    for i in (0..g.nodes.len()).rev() {
        let Some(dy) = flow[i].take() else { continue };
        let node = &g.nodes[i];
        let stale = || Error::MissingCache(format!("node {i} ({}) has no matching cache", node.name));
        match (&node.layer, &cache.caches[i]) {
            (Layer::Input { .. }, _) => {}
            (Layer::Quant { q, .. }, c) => {
                let signed = false;
                let (nu, bits) = (q.nu, q.bits);
                let dx = quant_backward(qat, c, &dy, cache.input_of(g, i), nu, bits, signed, opts, &mut grads[i][0][0])
                    .ok_or_else(stale)?;
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::OutputQuant { q }, c) => {
                let dx = quant_backward(qat, c, &dy, cache.input_of(g, i), q.nu, q.bits, true, opts, &mut grads[i][0][0])
                    .ok_or_else(stale)?;
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::Conv2d(_) | Layer::Linear(_), NodeCache::Conv { wbar, points }) => {
                let (weights, wq, geom) = match &node.layer {
                    Layer::Conv2d(c) => (&c.weights, c.wq, conv_geom(c)),
                    Layer::Linear(l) => (&l.weights, l.wq, linear_geom(l)),
                    _ => unreachable!(),
                };
                let x = cache.input_of(g, i);
                let mut dwbar = vec![0.0; weights.len()];
                let mut dx = Vec::with_capacity(x.len());
                for (t, d) in x.iter().zip(&dy) {
                    let (dxt, dwt) = tensor::conv2d_backward(t, wbar, &geom, d);
                    for (a, b) in dwbar.iter_mut().zip(&dwt) {
                        *a += b;
                    }
                    dx.push(dxt);
                }
                if qat {
                    let mut dnu = 0.0;
                    for (k, p) in points.iter().enumerate() {
                        let (pw, pn) = quantcore::ste_from_point(weights[k], p, wq.nu, true);
                        grads[i][0][k] = dwbar[k] * pw;
                        dnu += dwbar[k] * pn;
                    }
                    if opts.nu_grad_scale {
                        dnu *= quantcore::nu_grad_scale(weights.len(), wq.bits);
                    }
                    grads[i][1][0] = dnu;
                } else {
                    grads[i][0] = dwbar;
                }
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::BatchNorm(_) | Layer::MultiLevelBn(_), NodeCache::Bn(groups)) => {
                let mut dx: Value = dy.iter().map(|t| Tensor::zeros(t.shape)).collect();
                for grp in groups {
                    let bn = match &node.layer {
                        Layer::BatchNorm(bn) => bn,
                        Layer::MultiLevelBn(ml) => &ml.levels[grp.param],
                        _ => unreachable!(),
                    };
                    let (dgamma, dbeta) = bn_group_backward(bn, grp, &dy, &mut dx, cache.train);
                    let slot = 2 * grp.param;
                    for c in 0..bn.channels {
                        grads[i][slot][c] += dgamma[c];
                        grads[i][slot + 1][c] += dbeta[c];
                    }
                }
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::Relu, _) => {
                let dx = dy
                    .iter()
                    .zip(&cache.outputs[i])
                    .map(|(d, o)| Tensor {
                        shape: d.shape,
                        data: d.data.iter().zip(&o.data).map(|(d, o)| if *o > 0.0 { *d } else { 0.0 }).collect(),
                    })
                    .collect();
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::MaxPool { .. }, NodeCache::Pool(args)) => {
                let x = cache.input_of(g, i);
                let dx = x
                    .iter()
                    .zip(args)
                    .zip(&dy)
                    .map(|((t, a), d)| tensor::maxpool_backward(t.shape, a, d))
                    .collect();
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::Upsample, _) => {
                let x = cache.input_of(g, i);
                let dx = x
                    .iter()
                    .zip(&dy)
                    .map(|(t, d)| tensor::upsample_backward(t.shape, d))
                    .collect();
                accumulate(&mut flow[node.inputs[0]], dx);
            }
            (Layer::SkipAdd, _) => {
                accumulate(&mut flow[node.inputs[0]], dy.clone());
                accumulate(&mut flow[node.inputs[1]], dy);
            }
            (Layer::Pyramid, _) => {
                for (l, d) in dy.into_iter().enumerate() {
                    accumulate(&mut flow[node.inputs[l]], vec![d]);
                }
            }
            _ => return Err(stale()),
        }
    }
    Ok(grads)
}

#[allow(clippy::too_many_arguments)]
fn quant_backward(
    qat: bool,
    cache: &NodeCache,
    dy: &Value,
    x: &Value,
    nu: f64,
    bits: u32,
    signed: bool,
    opts: &BackwardOptions,
    dnu_out: &mut f64,
) -> Option<Value> {
    if !qat {
        return Some(dy.clone());
    }
    let NodeCache::Points(levels) = cache else {
        return None;
    };
    let mut dnu = 0.0;
    let mut dx = Vec::with_capacity(dy.len());
    for ((d, t), pts) in dy.iter().zip(x).zip(levels) {
        let mut out = Tensor::zeros(d.shape);
        for (k, p) in pts.iter().enumerate() {
            let (px, pn) = quantcore::ste_from_point(t.data[k], p, nu, signed);
            out.data[k] = d.data[k] * px;
            dnu += d.data[k] * pn;
        }
        dx.push(out);
    }
    if opts.nu_grad_scale {
        dnu *= quantcore::nu_grad_scale(per_sample_numel(x), bits);
    }
    *dnu_out = dnu;
    Some(dx)
}

fn bn_group_backward(
    bn: &BatchNorm,
    grp: &BnGroup,
    dy: &Value,
    dx: &mut Value,
    train: bool,
) -> (Vec<f64>, Vec<f64>) {
    let cc = bn.channels;
    let mut dgamma = vec![0.0; cc];
    let mut dbeta = vec![0.0; cc];
    let mut count = 0usize;
    for (j, &m) in grp.members.iter().enumerate() {
        let (d, xh) = (&dy[m], &grp.xhat[j]);
        for (k, (&dv, &h)) in d.data.iter().zip(&xh.data).enumerate() {
            let c = d.channel_of(k);
            dgamma[c] += dv * h;
            dbeta[c] += dv;
        }
        count += d.n() * d.plane();
    }
    let m = count as f64;
    for (j, &mi) in grp.members.iter().enumerate() {
        let (d, xh) = (&dy[mi], &grp.xhat[j]);
        let out = &mut dx[mi];
        for k in 0..d.data.len() {
            let c = d.channel_of(k);
            let scale = bn.gamma[c] * grp.inv_std[c];
            out.data[k] += if train {
                scale / m * (m * d.data[k] - dbeta[c] - xh.data[k] * dgamma[c])
            } else {
                scale * d.data[k]
            };
        }
    }
    (dgamma, dbeta)
}

/// Region summary of a quantizer node's last forward, for tests and reports.
pub fn clip_fractions(cache: &ForwardCache, node: usize) -> Option<[f64; 3]> {
    let NodeCache::Points(levels) = &cache.caches[node] else {
        return None;
    };
    let mut counts = [0usize; 3];
    for p in levels.iter().flatten() {
        counts[match p.region {
            Region::Low => 0,
            Region::Inside => 1,
            Region::High => 2,
        }] += 1;
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    Some(counts.map(|c| c as f64 / total))
}

/// Kind of every parameter slot, parallel to [`Gradients`].
pub fn param_kinds(g: &ModelGraph) -> Vec<Vec<ParamKind>> {
    g.nodes
        .iter()
        .map(|n| n.layer.params().iter().map(|(k, _)| *k).collect())
        .collect()
}
