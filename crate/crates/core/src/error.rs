use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid quantizer: {0}")]
    InvalidQuantizer(String),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("pyramid level {level} out of range (model has {levels})")]
    LevelOutOfRange { level: usize, levels: usize },

    #[error("forward cache missing or stale: {0}")]
    MissingCache(String),

    #[error("non-finite gradient in node {node} ({name})")]
    NonFiniteGradient { node: usize, name: String },

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty batch or dataset: {0}")]
    Empty(String),

    #[error("BN gamma {gamma} below clamp {min} in channel {channel}")]
    GammaBelowClamp { channel: usize, gamma: f64, min: f64 },

    #[error("no dyadic approximation of {ratio} fits a 32-bit accumulator (max |eta| = {max_abs})")]
    NoFeasibleDyadic { ratio: f64, max_abs: i64 },

    #[error("accumulator overflow risk in {context}: bound {bound} exceeds i32::MAX")]
    AccumulatorBound { context: String, bound: i64 },

    #[error("unsupported layer for lowering at node {node}: {kind}")]
    Unsupported { node: usize, kind: String },

    #[error("runtime accumulator overflow at op {op}")]
    Overflow { op: usize },

    #[error("plan rejected: {0}")]
    InvalidPlan(String),

    #[error("format version mismatch in {what}: found {found}, expected {expected}")]
    VersionMismatch { what: String, found: u32, expected: u32 },

    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },

    #[error("provenance mismatch: plan built from {plan}, graph hashes to {graph}")]
    Provenance { plan: String, graph: String },

    #[error("cost model has no price for {0}")]
    MissingPrice(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite { .. } => "non_finite",
            Error::Shape(_) => "shape",
            Error::InvalidQuantizer(_) => "invalid_quantizer",
            Error::InvalidTensor(_) => "invalid_tensor",
            Error::LevelOutOfRange { .. } => "level_out_of_range",
            Error::MissingCache(_) => "missing_cache",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Divergence { .. } => "divergence",
            Error::ArchitectureMismatch(_) => "architecture_mismatch",
            Error::InvalidGraph(_) => "invalid_graph",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Empty(_) => "empty",
            Error::GammaBelowClamp { .. } => "gamma_below_clamp",
            Error::NoFeasibleDyadic { .. } => "no_feasible_dyadic",
            Error::AccumulatorBound { .. } => "accumulator_bound",
            Error::Unsupported { .. } => "unsupported",
            Error::Overflow { .. } => "overflow",
            Error::InvalidPlan(_) => "invalid_plan",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Format { .. } => "format",
            Error::Provenance { .. } => "provenance",
            Error::MissingPrice(_) => "missing_price",
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn format(what: &str, msg: impl Into<String>) -> Self {
        Error::Format {
            what: what.to_string(),
            msg: msg.into(),
        }
    }
}
