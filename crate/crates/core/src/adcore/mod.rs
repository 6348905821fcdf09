//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod checkpoint;
mod gradcheck;
mod kernels;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{blob_path, Checkpoint, DType};
pub use gradcheck::{finite_difference_check, GradCheck};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::{broadcast_shapes, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tape has already been consumed by a reverse pass")]
    TapeConsumed,
    #[error("function is not deterministic: repeated evaluations differ")]
    NonDeterministic,
    #[error("{0}")]
    InvalidArgument(String),
}
