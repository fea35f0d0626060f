//! Synthetic multi-scale classification task, an FPN-style toy model with a
//! shared head, and the shared versus per-level normalization experiments.

mod data;
mod experiment;
mod model;
mod stats;

pub use data::*;
pub use experiment::*;
pub use model::*;
pub use stats::*;
