//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The primitive set is deliberately small: matrix products, elementwise
//! arithmetic, a handful of activations together with their first
//! derivatives, reductions, and concat/slice. Shapes are explicit; the only
//! implicit broadcast is a scalar factor in [`Op::Scale`].

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{gelu, gelu_d1, gelu_d2, logsumexp, tanh_d1, Axis, Gradients, Graph, NodeId, Op};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{op} expects {want} inputs, got {got}")]
    Arity { op: &'static str, want: usize, got: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward root must be 1x1, got {0:?}")]
    NotScalar([usize; 2]),
    #[error("unknown node {0}")]
    UnknownNode(usize),
}

#[cfg(test)]
mod tests;
