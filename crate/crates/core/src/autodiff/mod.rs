//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during one
//! forward pass; [`Tape::backward`] sweeps it in reverse and returns a
//! [`GradMap`] keyed by leaf. Piecewise primitives (`max`, `min`, `abs`,
//! `topk_mask`, `where`) route the gradient through the selected branch;
//! ties go to the first operand.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_check_with, GradCheckReport};
pub use tape::{FaultInjection, GradMap, Padding, Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid shape {0:?}: extents must be positive")]
    InvalidShape(Vec<usize>),
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}
