use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::data::{gen_dataset, to_dataset, DatasetConfig};
use super::model::{build_fpn_model, BnMode, FpnConfig, Precision};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::traingraph::{evaluate, init_quantized_from_fp, train, Dataset, ModelGraph, QuantMode, TrainConfig};

/// Seed streams drawn from each per-seed base.
const STREAM_TRAIN_DATA: u64 = 1;
const STREAM_TEST_DATA: u64 = 2;
const STREAM_INIT: u64 = 3;
const STREAM_FP_SHUFFLE: u64 = 4;
const STREAM_QAT_SHUFFLE: u64 = 5;

/// Fewest paired seeds for which comparisons are reported as meaningful.
pub const MIN_SEEDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: usize,
    pub base_seed: u64,
    pub bn_modes: Vec<BnMode>,
    pub precisions: Vec<Precision>,
    pub n_train: usize,
    pub n_test: usize,
    /// Training samples used to initialize activation intervals.
    pub calib: usize,
    pub dataset: DatasetConfig,
    pub model: FpnConfig,
    pub fp_train: TrainConfig,
    pub qat_train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetConfig {
            image: 16,
            ..DatasetConfig::default()
        };
        let model = FpnConfig {
            image: 16,
            ..FpnConfig::default()
        };
        Self {
            seeds: 8,
            base_seed: 0,
            bn_modes: vec![BnMode::Shared, BnMode::Multilevel],
            precisions: vec![Precision::Fp, Precision::Bits(2)],
            n_train: 1200,
            n_test: 600,
            calib: 256,
            dataset,
            model,
            fp_train: TrainConfig {
                lr: 0.05,
                epochs: 8,
                lr_steps: vec![6],
                batch_size: 32,
                mode: QuantMode::Fp,
                ..TrainConfig::default()
            },
            qat_train: TrainConfig {
                lr: 0.01,
                epochs: 6,
                lr_steps: vec![4],
                batch_size: 32,
                mode: QuantMode::Qat,
                ..TrainConfig::default()
            },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.fp_train.validate()?;
        self.qat_train.validate()?;
        if self.model.image != self.dataset.image {
            return Err(Error::InvalidConfig(format!(
                "model image {} differs from dataset image {}",
                self.model.image, self.dataset.image
            )));
        }
        if self.seeds == 0 || self.n_train == 0 || self.n_test == 0 || self.calib == 0 {
            return Err(Error::InvalidConfig("seeds, n_train, n_test and calib must be positive".into()));
        }
        if self.bn_modes.is_empty() || self.precisions.is_empty() {
            return Err(Error::InvalidConfig("the grid needs at least one bn mode and one precision".into()));
        }
        Ok(())
    }

    /// Base seed of the `k`-th paired seed.
    pub fn seed(&self, k: usize) -> u64 {
        derive_seed(self.base_seed, k as u64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub bn_mode: BnMode,
    pub precision: Precision,
    pub seed: u64,
    pub accuracy: f64,
    pub per_level: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub precision: Precision,
    pub pairs: usize,
    pub mean_shared: f64,
    pub mean_multilevel: f64,
    /// Multilevel minus shared accuracy, one entry per seed.
    pub diffs: Vec<f64>,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign test for multilevel > shared.
    pub p_greater: f64,
    pub p_two_sided: f64,
    pub enough_seeds: bool,
}

#[derive(Clone, Debug)]
pub struct TrainedCell {
    pub result: CellResult,
    pub model: ModelGraph,
}

#[derive(Clone, Debug)]
pub struct ExperimentResults {
    pub cells: Vec<TrainedCell>,
    pub comparisons: Vec<Comparison>,
}

/// `P(X >= k)` and the two-sided p-value for `X ~ Binomial(n, 1/2)`.
pub fn sign_test(wins: usize, losses: usize) -> (f64, f64) {
    let n = (wins + losses) as u64;
    if n == 0 {
        return (1.0, 1.0);
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    let upper = if wins == 0 { 1.0 } else { b.sf(wins as u64 - 1) };
    let lower = b.cdf(wins as u64);
    (upper, (2.0 * upper.min(lower)).min(1.0))
}

/// Train and test sets of the `k`-th seed.
pub fn seed_data(cfg: &ExperimentConfig, k: usize) -> Result<(Dataset, Dataset)> {
    let s = cfg.seed(k);
    let tr = gen_dataset(derive_seed(s, STREAM_TRAIN_DATA), cfg.n_train, &cfg.dataset)?;
    let te = gen_dataset(derive_seed(s, STREAM_TEST_DATA), cfg.n_test, &cfg.dataset)?;
    Ok((to_dataset(&tr, cfg.dataset.image)?, to_dataset(&te, cfg.dataset.image)?))
}

/// Trains the full-precision model of one seed and mode, then a QAT model per
/// requested bitwidth initialized from it. Returns one cell per precision.
pub fn train_seed_mode(
    cfg: &ExperimentConfig,
    k: usize,
    mode: BnMode,
    data: &(Dataset, Dataset),
) -> Result<Vec<TrainedCell>> {
    let s = cfg.seed(k);
    let (train_set, test_set) = data;
    let mut fp = build_fpn_model(mode, Precision::Fp, &cfg.model)?;
    fp.init_params(derive_seed(s, STREAM_INIT));
    let fp_cfg = TrainConfig {
        seed: derive_seed(s, STREAM_FP_SHUFFLE),
        mode: QuantMode::Fp,
        ..cfg.fp_train.clone()
    };
    train(&mut fp, train_set, None, &fp_cfg)?;
    let mut cells = Vec::new();
    for &p in &cfg.precisions {
        let model = match p {
            Precision::Fp => fp.clone(),
            Precision::Bits(_) => {
                let template = build_fpn_model(mode, p, &cfg.model)?;
                let calib: Vec<usize> = (0..cfg.calib.min(train_set.len())).collect();
                let mut q = init_quantized_from_fp(&template, &fp, &train_set.subset(&calib).images)?;
                let qat_cfg = TrainConfig {
                    seed: derive_seed(s, STREAM_QAT_SHUFFLE),
                    mode: QuantMode::Qat,
                    ..cfg.qat_train.clone()
                };
                train(&mut q, train_set, None, &qat_cfg)?;
                q
            }
        };
        let ev = evaluate(&model, test_set, 256)?;
        cells.push(TrainedCell {
            result: CellResult {
                bn_mode: mode,
                precision: p,
                seed: s,
                accuracy: ev.accuracy,
                per_level: ev.per_level,
            },
            model,
        });
    }
    Ok(cells)
}

/// Paired comparison of multilevel against shared accuracy per precision.
pub fn compare(cells: &[CellResult], precisions: &[Precision]) -> Vec<Comparison> {
    let mut out = Vec::new();
    for &p in precisions {
        let pick = |m: BnMode| -> Vec<&CellResult> {
            cells.iter().filter(|c| c.precision == p && c.bn_mode == m).collect()
        };
        let (shared, multi) = (pick(BnMode::Shared), pick(BnMode::Multilevel));
        let pairs: Vec<(f64, f64)> = shared
            .iter()
            .filter_map(|s| multi.iter().find(|m| m.seed == s.seed).map(|m| (s.accuracy, m.accuracy)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let n = pairs.len() as f64;
        let diffs: Vec<f64> = pairs.iter().map(|(s, m)| m - s).collect();
        let wins = diffs.iter().filter(|d| **d > 0.0).count();
        let losses = diffs.iter().filter(|d| **d < 0.0).count();
        let (p_greater, p_two_sided) = sign_test(wins, losses);
        out.push(Comparison {
            precision: p,
            pairs: pairs.len(),
            mean_shared: pairs.iter().map(|x| x.0).sum::<f64>() / n,
            mean_multilevel: pairs.iter().map(|x| x.1).sum::<f64>() / n,
            wins,
            losses,
            ties: diffs.len() - wins - losses,
            diffs,
            p_greater,
            p_two_sided,
            enough_seeds: pairs.len() >= MIN_SEEDS,
        });
    }
    out
}

/// Trains every cell of `{bn_mode} x {precision} x seeds` in a fixed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults> {
    cfg.validate()?;
    let mut cells = Vec::new();
    for k in 0..cfg.seeds {
        let data = seed_data(cfg, k)?;
        for &mode in &cfg.bn_modes {
            cells.extend(train_seed_mode(cfg, k, mode, &data)?);
        }
    }
    let results: Vec<CellResult> = cells.iter().map(|c| c.result.clone()).collect();
    let comparisons = compare(&results, &cfg.precisions);
    Ok(ExperimentResults { cells, comparisons })
}

impl ExperimentResults {
    pub fn results(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().map(|c| &c.result)
    }

    /// `bn_mode,bits,seed,level,accuracy`; level `all` is the overall accuracy.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bn_mode,bits,seed,level,accuracy")?;
        for r in self.results() {
            writeln!(w, "{},{},{},all,{}", r.bn_mode, r.precision, r.seed, r.accuracy)?;
            for (l, a) in r.per_level.iter().enumerate() {
                writeln!(w, "{},{},{},{},{}", r.bn_mode, r.precision, r.seed, l, a)?;
            }
        }
        Ok(())
    }

    /// Mean accuracy per cell and the paired comparisons, as aligned text.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let mut keys: Vec<(Precision, BnMode)> = self.results().map(|r| (r.precision, r.bn_mode)).collect();
        keys.sort();
        keys.dedup();
        let levels = self.results().map(|r| r.per_level.len()).max().unwrap_or(0);
        let _ = write!(s, "{:<6} {:<11} {:>5} {:>8}", "bits", "bn_mode", "seeds", "accuracy");
        for l in 0..levels {
            let _ = write!(s, " {:>8}", format!("level{l}"));
        }
        s.push('\n');
        for (p, m) in keys {
            let rows: Vec<&CellResult> = self.results().filter(|r| r.precision == p && r.bn_mode == m).collect();
            let n = rows.len() as f64;
            let _ = write!(
                s,
                "{:<6} {:<11} {:>5} {:>8.4}",
                p.to_string(),
                m.to_string(),
                rows.len(),
                rows.iter().map(|r| r.accuracy).sum::<f64>() / n
            );
            for l in 0..levels {
                let v: Vec<f64> = rows
                    .iter()
                    .filter_map(|r| r.per_level.get(l).copied())
                    .filter(|v| !v.is_nan())
                    .collect();
                let mean = if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
                let _ = write!(s, " {mean:>8.4}");
            }
            s.push('\n');
        }
        for c in &self.comparisons {
            let _ = writeln!(
                s,
                "bits={} multilevel-shared mean={:+.4} wins={} losses={} ties={} p_greater={:.4} p_two_sided={:.4}{}",
                c.precision,
                c.mean_multilevel - c.mean_shared,
                c.wins,
                c.losses,
                c.ties,
                c.p_greater,
                c.p_two_sided,
                if c.enough_seeds { "" } else { " (too few seeds)" }
            );
        }
        s
    }
}
