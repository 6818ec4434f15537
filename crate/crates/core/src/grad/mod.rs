//! Differentiable computation: tensors, a recorded graph of primitives,
//! reverse accumulation and finite-difference checking.

mod check;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use check::{gradcheck, gradcheck_with, GradCase, GradCheckOptions, GradEntry, GradReport, LossFn};
pub use graph::{Graph, Var};
pub use tensor::{BitPattern, Real, Tensor};
