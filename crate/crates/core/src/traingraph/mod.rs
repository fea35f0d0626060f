//! Deterministic training engine for small convolutional networks with fake
//! quantization.

mod checkpoint;
mod gradcheck;
mod graph;
mod layers;
mod train;
pub mod tensor;

pub use checkpoint::*;
pub use gradcheck::*;
pub use graph::*;
pub use layers::*;
pub use train::*;
pub use tensor::{ConvGeom, Tensor};
