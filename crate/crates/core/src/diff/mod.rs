//! Dense rank ≤ 2 tensors with define-by-run reverse-mode differentiation.
//!
//! Every model and loss in this crate is expressed as operations recorded on
//! a [`Tape`]; one tape is built per bag and discarded after the backward
//! sweep. [`grad_check`] compares the analytic adjoints against central
//! finite differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, Stencil};
pub use tape::{argmax_of, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite loss while probing parameter {param}")]
    NonFiniteLoss { param: usize },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
}
