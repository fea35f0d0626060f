use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::head_bn_nodes;
use crate::error::{Error, Result};
use crate::traingraph::{forward, Dataset, ForwardOptions, ModelGraph};

/// Gap threshold in units of the pooled standard error.
pub const DIVERGENCE_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRecord {
    pub epoch: usize,
    pub level: usize,
    pub layer: String,
    pub channel: usize,
    /// Mean of the BN input over samples and positions.
    pub mean: f64,
    /// Variance of the BN input over samples and positions.
    pub var: f64,
    /// Standard error of `mean`, from the spread of per-sample means.
    pub std_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDivergence {
    pub layer: String,
    /// Largest `|mean_i - mean_j|` over level pairs and channels.
    pub max_gap: f64,
    /// Largest gap divided by its pooled standard error.
    pub max_z: f64,
    pub flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub records: Vec<StatsRecord>,
    pub layers: Vec<LayerDivergence>,
}

impl StatsReport {
    /// Whether any designated layer diverges.
    pub fn any_flag(&self) -> bool {
        self.layers.iter().any(|l| l.flag)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,level,layer,channel,mean,var,std_err")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.epoch, r.level, r.layer, r.channel, r.mean, r.var, r.std_err
            )?;
        }
        Ok(())
    }
}

/// Running sums for one (level, channel).
#[derive(Clone, Copy, Default)]
struct Acc {
    /// Samples seen.
    n: usize,
    /// Elements seen.
    elems: usize,
    sum: f64,
    sum_sq: f64,
    /// Sum and sum of squares of per-sample means.
    m_sum: f64,
    m_sq: f64,
}

/// Per-level statistics of the inputs of every head normalization layer,
/// from eval-mode passes over `data`.
pub fn collect_stats(g: &ModelGraph, data: &Dataset, epoch: usize, batch: usize) -> Result<StatsReport> {
    if data.is_empty() {
        return Err(Error::Empty("statistics dataset".into()));
    }
    let layers = head_bn_nodes(g);
    if layers.is_empty() {
        return Err(Error::InvalidGraph("model has no head normalization layers".into()));
    }
    let mut acc: Vec<Vec<Vec<Acc>>> = Vec::new();
    for start in (0..data.len()).step_by(batch.max(1)) {
        let idx: Vec<usize> = (start..data.len().min(start + batch.max(1))).collect();
        let sub = data.subset(&idx);
        let cache = forward(g, &sub.images, &ForwardOptions::eval())?;
        if acc.is_empty() {
            acc = layers
                .iter()
                .map(|&i| {
                    cache
                        .input_of(g, i)
                        .iter()
                        .map(|t| vec![Acc::default(); t.c()])
                        .collect()
                })
                .collect();
        }
        for (k, &i) in layers.iter().enumerate() {
            for (l, t) in cache.input_of(g, i).iter().enumerate() {
                let plane = t.plane();
                for n in 0..t.n() {
                    for c in 0..t.c() {
                        let off = (n * t.c() + c) * plane;
                        let xs = &t.data[off..off + plane];
                        let s: f64 = xs.iter().sum();
                        let a = &mut acc[k][l][c];
                        a.n += 1;
                        a.elems += plane;
                        a.sum += s;
                        a.sum_sq += xs.iter().map(|v| v * v).sum::<f64>();
                        let m = s / plane as f64;
                        a.m_sum += m;
                        a.m_sq += m * m;
                    }
                }
            }
        }
    }
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for (k, &i) in layers.iter().enumerate() {
        let name = g.nodes[i].name.clone();
        let mut stats: Vec<Vec<(f64, f64)>> = Vec::new();
        for (l, chans) in acc[k].iter().enumerate() {
            let mut row = Vec::new();
            for (c, a) in chans.iter().enumerate() {
                let mean = a.sum / a.elems as f64;
                let var = (a.sum_sq / a.elems as f64 - mean * mean).max(0.0);
                let n = a.n as f64;
                let sample_mean = a.m_sum / n;
                let spread = if a.n > 1 {
                    ((a.m_sq - n * sample_mean * sample_mean) / (n - 1.0)).max(0.0)
                } else {
                    0.0
                };
                let std_err = (spread / n).sqrt();
                records.push(StatsRecord {
                    epoch,
                    level: l,
                    layer: name.clone(),
                    channel: c,
                    mean,
                    var,
                    std_err,
                });
                row.push((mean, std_err));
            }
            stats.push(row);
        }
        let (mut max_gap, mut max_z, mut flag) = (0.0f64, 0.0f64, false);
        for a in 0..stats.len() {
            for b in a + 1..stats.len() {
                for (x, y) in stats[a].iter().zip(&stats[b]) {
                    let gap = (x.0 - y.0).abs();
                    let se = (x.1 * x.1 + y.1 * y.1).sqrt();
                    max_gap = max_gap.max(gap);
                    if gap > DIVERGENCE_SIGMAS * se && gap > 0.0 {
                        flag = true;
                    }
                    let z = if se > 0.0 {
                        gap / se
                    } else if gap > 0.0 {
                        f64::INFINITY
                    } else {
                        0.0
                    };
                    max_z = max_z.max(z);
                }
            }
        }
        summary.push(LayerDivergence {
            layer: name,
            max_gap,
            max_z,
            flag,
        });
    }
    Ok(StatsReport {
        records,
        layers: summary,
    })
}
