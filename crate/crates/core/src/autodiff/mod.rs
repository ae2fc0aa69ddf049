//! Dense `f64` tensors with a tape-style reverse-mode differentiator.
//!
//! Broadcasting is limited to scalars ([`Graph::scale`], [`Graph::add_scalar`])
//! and row-vector biases ([`Graph::add_row`], [`Graph::mul_row`]); every other
//! shape mismatch is an error.

mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use check::grad_check;
pub use graph::{Axis, Gradients, Graph, Var};
pub use tensor::{Result, Tensor, TensorError};
