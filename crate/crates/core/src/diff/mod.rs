//! Reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gemm;
mod graph;
mod tensor;

pub use adam::{adam_step, lr_schedule, Adam, AdamConfig, AdamState};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
