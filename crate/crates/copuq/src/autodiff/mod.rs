//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

mod check;
mod graph;
mod tensor;

pub use check::finite_difference_check;
pub use graph::{Bindings, Evaluation, GradientMap, Graph, NodeId, Params};
pub use tensor::Tensor;
