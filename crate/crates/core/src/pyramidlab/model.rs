use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::data::{CLASSES, LEVELS};
use crate::error::{Error, Result};
use crate::traingraph::{BatchNorm, Conv2d, Layer, ModelGraph, QuantMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    /// One BN per head layer, statistics pooled over all levels.
    Shared,
    /// One private BN per head layer and level.
    Multilevel,
}

impl fmt::Display for BnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BnMode::Shared => "shared",
            BnMode::Multilevel => "multilevel",
        })
    }
}

impl FromStr for BnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(BnMode::Shared),
            "multilevel" => Ok(BnMode::Multilevel),
            _ => Err(Error::InvalidConfig(format!("unknown bn mode {s:?}"))),
        }
    }
}

/// Full precision or a low bitwidth for every non-boundary quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Precision {
    Fp,
    Bits(u32),
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::Fp => f.write_str("fp"),
            Precision::Bits(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(Precision::Fp),
            "2" | "3" | "4" => Ok(Precision::Bits(s.parse().unwrap())),
            _ => Err(Error::InvalidConfig(format!("precision {s:?} is not one of fp, 2, 3, 4"))),
        }
    }
}

impl TryFrom<String> for Precision {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Precision> for String {
    fn from(p: Precision) -> String {
        p.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpnConfig {
    pub image: usize,
    /// Channels of every pyramid level and head layer.
    pub width: usize,
    pub classes: usize,
}

impl Default for FpnConfig {
    fn default() -> Self {
        Self {
            image: 32,
            width: 8,
            classes: CLASSES,
        }
    }
}

/// Name prefix of the head layers whose weights are shared across levels.
pub const HEAD_PREFIX: &str = "head";

struct Builder {
    g: ModelGraph,
    bits: u32,
}

impl Builder {
    fn conv(&mut self, name: &str, x: usize, shape: (usize, usize, usize, usize), boundary: bool) -> usize {
        let (in_c, out_c, k, stride) = shape;
        let bits = if boundary { 8 } else { self.bits };
        let conv = Conv2d::new(in_c, out_c, k, stride, k / 2, bits, boundary);
        self.g.add(name, Layer::Conv2d(conv), &[x])
    }

    fn quant(&mut self, name: &str, x: usize, boundary: bool) -> usize {
        let bits = if boundary { 8 } else { self.bits };
        self.g.add(name, Layer::quant(bits, boundary), &[x])
    }

    /// Conv, BN, ReLU and an activation quantizer.
    fn block(&mut self, name: &str, x: usize, shape: (usize, usize, usize, usize)) -> usize {
        let c = self.conv(&format!("{name}_conv"), x, shape, false);
        let b = self.g.add(format!("{name}_bn"), Layer::BatchNorm(BatchNorm::new(shape.1)), &[c]);
        let r = self.g.add(format!("{name}_relu"), Layer::Relu, &[b]);
        self.quant(&format!("{name}_quant"), r, false)
    }

    /// 1x1 lateral conv and BN, left un-rectified for the top-down sum.
    fn lateral(&mut self, name: &str, x: usize, in_c: usize, out_c: usize) -> usize {
        let c = self.conv(&format!("{name}_conv"), x, (in_c, out_c, 1, 1), false);
        self.g.add(format!("{name}_bn"), Layer::BatchNorm(BatchNorm::new(out_c)), &[c])
    }

    fn head_bn(&mut self, name: &str, x: usize, channels: usize, mode: BnMode) -> usize {
        let layer = match mode {
            BnMode::Shared => Layer::BatchNorm(BatchNorm::new(channels)),
            BnMode::Multilevel => Layer::multi_level_bn(channels, LEVELS),
        };
        self.g.add(name, layer, &[x])
    }
}

/// FPN-style toy classifier.
///
/// The trunk has four conv blocks producing features at full, half and
/// quarter resolution. 1x1 laterals and a nearest-neighbour top-down path
/// form three pyramid levels. The head is two 3x3 conv blocks and a 1x1
/// classifier, applied to every level with shared weights, followed by global
/// max pooling. Only the head normalizations depend on `mode`. The input
/// quantizer, the first conv, the classifier input and the classifier keep 8
/// bits.
pub fn build_fpn_model(mode: BnMode, precision: Precision, cfg: &FpnConfig) -> Result<ModelGraph> {
    if cfg.image < 8 || !cfg.image.is_multiple_of(4) {
        return Err(Error::InvalidConfig(format!(
            "image side {} must be a multiple of 4 and at least 8",
            cfg.image
        )));
    }
    if cfg.width == 0 || cfg.classes < 2 {
        return Err(Error::InvalidConfig("width must be positive and classes at least 2".into()));
    }
    let (qmode, bits) = match precision {
        Precision::Fp => (QuantMode::Fp, 8),
        Precision::Bits(b) if (2..=4).contains(&b) => (QuantMode::Qat, b),
        Precision::Bits(b) => return Err(Error::InvalidConfig(format!("unsupported bitwidth {b}"))),
    };
    let w = cfg.width;
    let mut b = Builder {
        g: ModelGraph::new(LEVELS, qmode),
        bits,
    };
    let x = b.g.add("input", Layer::Input { shape: [1, cfg.image, cfg.image] }, &[]);
    let xq = b.quant("input_quant", x, true);

    let stem = b.conv("c1_conv", xq, (1, w, 3, 1), true);
    let stem = b.g.add("c1_bn", Layer::BatchNorm(BatchNorm::new(w)), &[stem]);
    let stem = b.g.add("c1_relu", Layer::Relu, &[stem]);
    let c1 = b.quant("c1_quant", stem, false);
    let c2 = b.block("c2", c1, (w, 2 * w, 3, 2));
    let c3 = b.block("c3a", c2, (2 * w, 4 * w, 3, 2));
    let c3 = b.block("c3b", c3, (4 * w, 4 * w, 3, 1));

    let p2 = b.lateral("lat2", c3, 4 * w, w);
    let l1 = b.lateral("lat1", c2, 2 * w, w);
    let up2 = b.g.add("up2", Layer::Upsample, &[p2]);
    let p1 = b.g.add("td1", Layer::SkipAdd, &[l1, up2]);
    let l0 = b.lateral("lat0", c1, w, w);
    let up1 = b.g.add("up1", Layer::Upsample, &[p1]);
    let p0 = b.g.add("td0", Layer::SkipAdd, &[l0, up1]);

    let pyr = b.g.add("pyramid", Layer::Pyramid, &[p0, p1, p2]);
    let pyr = b.g.add("pyramid_relu", Layer::Relu, &[pyr]);
    let h = b.quant("pyramid_quant", pyr, false);

    let h = b.conv("head1_conv", h, (w, w, 3, 1), false);
    let h = b.head_bn("head1_bn", h, w, mode);
    let h = b.g.add("head1_relu", Layer::Relu, &[h]);
    let h = b.quant("head1_quant", h, false);
    let h = b.conv("head2_conv", h, (w, w, 3, 1), false);
    let h = b.head_bn("head2_bn", h, w, mode);
    let h = b.g.add("head2_relu", Layer::Relu, &[h]);
    let h = b.quant("head2_quant", h, true);
    let h = b.conv("head3_conv", h, (w, cfg.classes, 1, 1), true);
    let h = b.head_bn("head3_bn", h, cfg.classes, mode);
    let h = b.g.add("head_pool", Layer::MaxPool { kernel: None }, &[h]);
    b.g.add("output_quant", Layer::output_quant(8), &[h]);
    b.g.validate()?;
    Ok(b.g)
}

/// Indices of the normalization nodes inside the shared head.
pub fn head_bn_nodes(g: &ModelGraph) -> Vec<usize> {
    g.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| {
            n.name.starts_with(HEAD_PREFIX) && matches!(n.layer, Layer::BatchNorm(_) | Layer::MultiLevelBn(_))
        })
        .map(|(i, _)| i)
        .collect()
}

/// Trainable BN parameters (gamma and beta) of the head.
pub fn head_bn_param_count(g: &ModelGraph) -> usize {
    head_bn_nodes(g)
        .into_iter()
        .flat_map(|i| g.nodes[i].layer.params())
        .map(|(_, p)| p.len())
        .sum()
}

/// Conv and linear weight count.
pub fn conv_weight_count(g: &ModelGraph) -> usize {
    g.nodes
        .iter()
        .map(|n| match &n.layer {
            Layer::Conv2d(c) => c.weights.len(),
            Layer::Linear(l) => l.weights.len(),
            _ => 0,
        })
        .sum()
}

/// Multi-level copy of a shared-head model: every level starts from the
/// shared BN's parameters and running statistics.
pub fn to_multilevel(g: &ModelGraph) -> ModelGraph {
    let mut out = g.clone();
    for i in head_bn_nodes(g) {
        if let Layer::BatchNorm(bn) = &g.nodes[i].layer {
            out.nodes[i].layer = Layer::MultiLevelBn(crate::traingraph::MultiLevelBn {
                levels: vec![bn.clone(); g.levels],
            });
        }
    }
    out
}

/// Copy whose pyramid levels all receive the value of `level`.
pub fn with_identical_levels(g: &ModelGraph, level: usize) -> Result<ModelGraph> {
    let mut out = g.clone();
    let node = out
        .nodes
        .iter_mut()
        .find(|n| matches!(n.layer, Layer::Pyramid))
        .ok_or_else(|| Error::InvalidGraph("model has no pyramid".into()))?;
    let src = *node.inputs.get(level).ok_or(Error::LevelOutOfRange {
        level,
        levels: node.inputs.len(),
    })?;
    node.inputs = vec![src; node.inputs.len()];
    out.validate()?;
    Ok(out)
}
