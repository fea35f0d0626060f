use std::path::Path;

use intq_core::intexec::{CostModel, VerifyConfig};
use intq_core::lowering::LowerConfig;
use intq_core::pyramidlab::{BnMode, DatasetConfig, ExperimentConfig, FpnConfig, LEVELS};
use intq_core::seed::derive_seed;
use intq_core::traingraph::{QuantMode, TrainConfig};
use intq_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Seed streams split from the global seed, one per component.
pub mod stream {
    pub const TRAIN_DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const INIT: u64 = 3;
    pub const FP_SHUFFLE: u64 = 4;
    pub const QAT_SHUFFLE: u64 = 5;
    pub const VERIFY_DATA: u64 = 6;
    pub const GEN_INPUT: u64 = 7;
    pub const STATS_DATA: u64 = 8;
    pub const EXPERIMENT: u64 = 9;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub image: usize,
    pub mixture: [f64; LEVELS],
    pub noise: f64,
    pub spread: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            image: 16,
            mixture: d.mixture,
            noise: d.noise,
            spread: d.spread,
            n_train: 1200,
            n_test: 600,
        }
    }
}

impl DataSection {
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            image: self.image,
            mixture: self.mixture,
            noise: self.noise,
            spread: self.spread,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub bn_mode: BnMode,
    pub width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            bn_mode: BnMode::Multilevel,
            width: FpnConfig::default().width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeSection {
    pub bits: u32,
    /// Training samples used to initialize activation intervals.
    pub calib: usize,
    pub train: TrainConfig,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            bits: 2,
            calib: e.calib,
            train: e.qat_train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    /// Generated inputs when no input file is given.
    pub n: usize,
    pub drift_tol: f64,
    pub batch_size: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let v = VerifyConfig::default();
        Self {
            n: 1000,
            drift_tol: v.drift_tol,
            batch_size: v.batch_size,
        }
    }
}

impl VerifySection {
    pub fn config(&self) -> VerifyConfig {
        VerifyConfig {
            drift_tol: self.drift_tol,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub n: usize,
    pub epoch: usize,
}

impl Default for StatsSection {
    fn default() -> Self {
        Self { n: 600, epoch: 0 }
    }
}

/// Every option of every command, resolved from defaults, the config file
/// and command-line flags, in that order of increasing priority.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub quantize: QuantizeSection,
    pub lower: LowerConfig,
    pub verify: VerifySection,
    pub stats: StatsSection,
    pub cost: CostModel,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            model: ModelSection::default(),
            train: ExperimentConfig::default().fp_train,
            quantize: QuantizeSection::default(),
            lower: LowerConfig::default(),
            verify: VerifySection::default(),
            stats: StatsSection::default(),
            cost: CostModel::default(),
            experiment: ExperimentConfig::default(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with `path`, when given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", p.display(), e.message())))
            }
        }
    }

    /// Fills seeds derived from the global seed and checks the result.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = derive_seed(self.seed, stream::FP_SHUFFLE);
        self.train.mode = QuantMode::Fp;
        self.quantize.train.seed = derive_seed(self.seed, stream::QAT_SHUFFLE);
        self.quantize.train.mode = QuantMode::Qat;
        self.experiment.base_seed = derive_seed(self.seed, stream::EXPERIMENT);
        self.data.dataset().validate()?;
        self.train.validate()?;
        self.quantize.train.validate()?;
        self.cost.validate()?;
        if !(2..=8).contains(&self.quantize.bits) {
            return Err(Error::InvalidConfig(format!("bits {} outside 2..=8", self.quantize.bits)));
        }
        Ok(self)
    }

    pub fn fpn(&self) -> FpnConfig {
        FpnConfig {
            image: self.data.image,
            width: self.model.width,
            ..FpnConfig::default()
        }
    }

    pub fn component_seed(&self, stream: u64) -> u64 {
        derive_seed(self.seed, stream)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
