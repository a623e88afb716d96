//! Dense tensors with a tape-based reverse-mode differentiation engine.
//!
//! Every operation on a [`Var`] appends a node to its [`Graph`]. Nodes are
//! immutable once recorded, so the tape order is a valid topological order and
//! the backward pass is a single reverse sweep over it.
//!
//! The engine is generic over [`Real`] so that the same model code runs in
//! single precision for training and in double precision for the
//! verification oracles.

mod backward;
mod check;
mod graph;
mod real;
mod tensor;

pub use check::{finite_difference_check, Differentiable};
pub use graph::{Graph, Var};
pub(crate) use graph::{GELU_A, GELU_C};
pub use real::Real;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op}: operand outside the domain of the operation ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("gradient needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("variable belongs to a different graph")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
