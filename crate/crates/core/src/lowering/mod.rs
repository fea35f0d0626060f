//! Lowering of trained fake-quant graphs to integer-only plans.

mod dyadic;
mod lower;
mod plan;
mod validate;

pub use dyadic::*;
pub use lower::*;
pub use plan::*;
pub use validate::*;
