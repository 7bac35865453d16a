//! Tensors, reverse-mode differentiation, Adam and the `BIQT` codec.

pub mod adam;
pub mod biqt;
pub mod gradcheck;
pub mod graph;
pub mod real;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
