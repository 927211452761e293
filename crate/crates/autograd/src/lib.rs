//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! Graphs are built per sample over `[C, H, W]` tensors. Batches are handled
//! by the caller: one graph per sample, gradients summed into a
//! [`GradBuffer`] in a fixed order.

pub mod conv;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, SparseMap, Var, GATHER_ZERO};
pub use optim::{Adam, AdamConfig};
pub use params::{GradBuffer, ParamId, ParamStore};
pub use tensor::Tensor;
