//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Graphs are built fresh for every evaluation (define-by-run). Leaves hold
//! accumulated gradients; [`Graph::zero_grads`] resets them.

mod check;
mod graph;
mod real;
mod tensor;

pub use check::{analytic_gradients, finite_difference_check, CheckReport};
pub use graph::{Graph, Var};
pub use real::{Precision, Real};
pub use tensor::Tensor;
