//! Dense tensors with a reverse-mode tape.
//!
//! Operations are recorded in forward order on a [`Tape`]; gradients are
//! accumulated in reverse order with a fixed summation order, so repeated
//! runs over the same inputs are bit-identical.

pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("invalid tensor shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} elements, got {len}", .shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {ndim}")]
    InvalidAxis { axis: usize, ndim: usize },
    #[error("invalid permutation {0:?}")]
    InvalidPermutation(Vec<usize>),
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error("{0}: non-finite input")]
    NonFinite(&'static str),
    #[error("zero-norm row {row} in cosine similarity")]
    ZeroNorm { row: usize },
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
