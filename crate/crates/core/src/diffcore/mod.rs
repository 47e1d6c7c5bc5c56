//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles; [`Tape::backward`] sweeps the
//! record in reverse. Only the primitives the encoder and learner need are provided, and the
//! right operand of elementwise ops may only expand over leading dimensions (its shape must be a
//! trailing suffix of the left operand's shape).

mod gradcheck;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use primitive::{apply_primitive, Primitive, PrimitiveKind};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Slope of every Leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value encountered at coordinate {coord}")]
    NonFinite { coord: usize },
}
