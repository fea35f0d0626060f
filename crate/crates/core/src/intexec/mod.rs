//! Integer-only execution of lowered plans, operation census, energy
//! estimates and verification against the source checkpoint.

mod census;
mod exec;
pub mod reference;
mod verify;

pub use census::*;
pub use exec::*;
pub use reference::{simulate_exact, RefTensor};
pub use verify::*;
