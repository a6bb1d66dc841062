//! Dense 2-D matrices with tape-based reverse-mode differentiation.
//!
//! Every differentiable quantity in the crate (model activations, soft
//! conformity scores, the losses) is built from the primitives on [`Tensor`]
//! plus a handful of fused [`CustomOp`]s defined next to the code that needs
//! them.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{grad_check, objective};
pub use matrix::Matrix;
pub use tape::{first_argmax, sigmoid, softmax_in_place, CustomOp, Tape, Tensor};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {}x{} and {}x{}", left.0, left.1, right.0, right.1)]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("{rows}x{cols} matrix cannot hold {len} values")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("backward root must be 1x1, got {}x{}", shape.0, shape.1)]
    NotScalar { shape: (usize, usize) },
    #[error("tensor belongs to a different tape")]
    ForeignTensor,
    #[error("non-finite value in {context}")]
    NonFinite { context: String },
    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Self::ShapeMismatch { op, left, right }
    }
}
