//! Quantization-aware training, integer-only lowering and bit-exact integer
//! execution for small convolutional networks.

pub mod error;
pub mod intexec;
pub mod lowering;
pub mod pyramidlab;
pub mod quantcore;
pub mod seed;
pub mod traingraph;

pub use error::{Error, Result};
pub use quantcore::{ActQuantizer, QuantTensor, SignedQuantizer, WtQuantizer};
pub use traingraph::{ModelGraph, Tensor};
