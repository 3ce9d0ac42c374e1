//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is built fresh for every forward pass; [`Graph::backward`]
//! then walks the tape in reverse and accumulates vector-Jacobian products
//! into every tracked node. Both the parameter gradients used by the trainer
//! and the input gradients used by the attack come from this one sweep.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, relative_error, GradCheck};
pub use graph::{Graph, Primitive, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: expected {expected} inputs, got {found}")]
    Arity {
        op: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("shape {shape:?} does not describe {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },
    #[error("rows have different lengths ({expected} vs {found})")]
    RaggedRows { expected: usize, found: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}
