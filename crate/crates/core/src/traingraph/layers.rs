use serde::{Deserialize, Serialize};

use crate::quantcore::{ActQuantizer, SignedQuantizer, WtQuantizer};

/// Lower bound enforced on BN `gamma` after every optimizer step, so every
/// lowered channel scale stays positive.
pub const GAMMA_MIN: f64 = 1e-3;

/// Lower bound enforced on every quantization interval.
pub const NU_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `(out_c, in_c, kernel, kernel)`, row-major.
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub wq: WtQuantizer,
    /// Input/output layers stay at 8 bits regardless of the model bitwidth.
    pub boundary: bool,
}

impl Conv2d {
    /// Zero-initialized conv with a unit weight interval.
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, padding: usize, bits: u32, boundary: bool) -> Self {
        Self {
            in_c,
            out_c,
            kernel,
            stride,
            padding,
            weights: vec![0.0; out_c * in_c * kernel * kernel],
            wq: WtQuantizer { nu: 1.0, bits },
            boundary,
        }
    }
}

/// Fully connected layer over a whole `(C, H, W)` input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_shape: [usize; 3],
    pub out_features: usize,
    /// `(out_features, C * H * W)`.
    #[serde(skip)]
    pub weights: Vec<f64>,
    pub wq: WtQuantizer,
    pub boundary: bool,
}

impl Linear {
    pub fn new(in_shape: [usize; 3], out_features: usize, bits: u32, boundary: bool) -> Self {
        Self {
            in_shape,
            out_features,
            weights: vec![0.0; out_features * in_shape.iter().product::<usize>()],
            wq: WtQuantizer { nu: 1.0, bits },
            boundary,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    #[serde(skip)]
    pub gamma: Vec<f64>,
    #[serde(skip)]
    pub beta: Vec<f64>,
    #[serde(skip)]
    pub running_mean: Vec<f64>,
    #[serde(skip)]
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Exponential moving average update of the running statistics.
    pub fn update_stats(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * batch_mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * batch_var[c];
        }
    }

    /// Eval-mode normalization of one value.
    pub fn eval(&self, c: usize, x: f64) -> f64 {
        (x - self.running_mean[c]) / (self.running_var[c] + self.eps).sqrt() * self.gamma[c]
            + self.beta[c]
    }
}

/// One private [`BatchNorm`] per pyramid level behind shared weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLevelBn {
    pub levels: Vec<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    /// Real-valued network input of shape `(C, H, W)`.
    Input { shape: [usize; 3] },
    /// Activation fake-quantization (the conv input quantizer).
    Quant { q: ActQuantizer, boundary: bool },
    /// Signed 8-bit quantizer of the output head.
    OutputQuant { q: SignedQuantizer },
    Conv2d(Conv2d),
    Linear(Linear),
    BatchNorm(BatchNorm),
    MultiLevelBn(MultiLevelBn),
    Relu,
    /// `Some(k)`: `k x k` window with stride `k`; `None`: global.
    MaxPool { kernel: Option<usize> },
    /// Nearest-neighbour x2.
    Upsample,
    SkipAdd,
    /// Collects one single-level input per pyramid level.
    Pyramid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Gamma,
    Beta,
    Nu,
}

impl Layer {
    /// Activation quantizer with a unit interval.
    pub fn quant(bits: u32, boundary: bool) -> Self {
        Layer::Quant {
            q: ActQuantizer { nu: 1.0, bits },
            boundary,
        }
    }

    pub fn output_quant(bits: u32) -> Self {
        Layer::OutputQuant {
            q: SignedQuantizer { nu: 1.0, bits },
        }
    }

    pub fn multi_level_bn(channels: usize, levels: usize) -> Self {
        Layer::MultiLevelBn(MultiLevelBn {
            levels: vec![BatchNorm::new(channels); levels],
        })
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Input { .. } => "input",
            Layer::Quant { .. } => "quant",
            Layer::OutputQuant { .. } => "output_quant",
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::MultiLevelBn(_) => "multilevel_bn",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Upsample => "upsample",
            Layer::SkipAdd => "skip_add",
            Layer::Pyramid => "pyramid",
        }
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<(ParamKind, &[f64])> {
        match self {
            Layer::Quant { q, .. } => vec![(ParamKind::Nu, std::slice::from_ref(&q.nu))],
            Layer::OutputQuant { q } => vec![(ParamKind::Nu, std::slice::from_ref(&q.nu))],
            Layer::Conv2d(c) => vec![
                (ParamKind::Weight, &c.weights[..]),
                (ParamKind::Nu, std::slice::from_ref(&c.wq.nu)),
            ],
            Layer::Linear(l) => vec![
                (ParamKind::Weight, &l.weights[..]),
                (ParamKind::Nu, std::slice::from_ref(&l.wq.nu)),
            ],
            Layer::BatchNorm(bn) => vec![(ParamKind::Gamma, &bn.gamma[..]), (ParamKind::Beta, &bn.beta[..])],
            Layer::MultiLevelBn(ml) => ml
                .levels
                .iter()
                .flat_map(|bn| [(ParamKind::Gamma, &bn.gamma[..]), (ParamKind::Beta, &bn.beta[..])])
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        match self {
            Layer::Quant { q, .. } => vec![(ParamKind::Nu, std::slice::from_mut(&mut q.nu))],
            Layer::OutputQuant { q } => vec![(ParamKind::Nu, std::slice::from_mut(&mut q.nu))],
            Layer::Conv2d(c) => vec![
                (ParamKind::Weight, &mut c.weights[..]),
                (ParamKind::Nu, std::slice::from_mut(&mut c.wq.nu)),
            ],
            Layer::Linear(l) => vec![
                (ParamKind::Weight, &mut l.weights[..]),
                (ParamKind::Nu, std::slice::from_mut(&mut l.wq.nu)),
            ],
            Layer::BatchNorm(bn) => vec![
                (ParamKind::Gamma, &mut bn.gamma[..]),
                (ParamKind::Beta, &mut bn.beta[..]),
            ],
            Layer::MultiLevelBn(ml) => ml
                .levels
                .iter_mut()
                .flat_map(|bn| [(ParamKind::Gamma, &mut bn.gamma[..]), (ParamKind::Beta, &mut bn.beta[..])])
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Every real array stored outside the text header, in declaration order:
    /// trainable parameters first, then BN running statistics.
    pub(crate) fn blob_arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match self {
            Layer::Conv2d(c) => out.push(&c.weights),
            Layer::Linear(l) => out.push(&l.weights),
            Layer::BatchNorm(bn) => out.extend(bn_arrays(bn)),
            Layer::MultiLevelBn(ml) => {
                for bn in &ml.levels {
                    out.extend(bn_arrays(bn));
                }
            }
            _ => {}
        }
        out
    }

    /// Expected lengths of [`Layer::blob_arrays`], derived from header fields.
    pub(crate) fn blob_lens(&self) -> Vec<usize> {
        match self {
            Layer::Conv2d(c) => vec![c.out_c * c.in_c * c.kernel * c.kernel],
            Layer::Linear(l) => vec![l.out_features * l.in_features()],
            Layer::BatchNorm(bn) => vec![bn.channels; 4],
            Layer::MultiLevelBn(ml) => ml.levels.iter().flat_map(|bn| vec![bn.channels; 4]).collect(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn blob_arrays_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out: Vec<&mut Vec<f64>> = Vec::new();
        match self {
            Layer::Conv2d(c) => out.push(&mut c.weights),
            Layer::Linear(l) => out.push(&mut l.weights),
            Layer::BatchNorm(bn) => out.extend(bn_arrays_mut(bn)),
            Layer::MultiLevelBn(ml) => {
                for bn in &mut ml.levels {
                    out.extend(bn_arrays_mut(bn));
                }
            }
            _ => {}
        }
        out
    }
}

fn bn_arrays(bn: &BatchNorm) -> [&[f64]; 4] {
    [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
}

fn bn_arrays_mut(bn: &mut BatchNorm) -> [&mut Vec<f64>; 4] {
    [
        &mut bn.gamma,
        &mut bn.beta,
        &mut bn.running_mean,
        &mut bn.running_var,
    ]
}
