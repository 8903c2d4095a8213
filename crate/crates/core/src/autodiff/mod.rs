//! Reverse-mode differentiation with per-op precision dispatch, dynamic loss
//! scaling and an Adam optimizer with optional FP32 master weights.

mod optim;
mod policy;
mod scaler;
mod tape;

pub use optim::{Adam, AdamConfig, ParamState};
pub use policy::{dispatch_precision, OpKind, OptLevel, PrecisionPolicy};
pub use scaler::{
    scaler_step, LossScaler, DEFAULT_GROWTH_INTERVAL, INITIAL_SCALE, MAX_SCALE, MIN_SCALE,
};
pub use tape::{check_overflow, FoldCache, GemmStats, Gradients, Matrix, NodeId, Tape};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("unknown op kind `{0}`")]
    UnknownOpKind(String),
    #[error("unknown opt level `{0}` (expected O0, O1, O2 or O3)")]
    UnknownOptLevel(String),
    #[error("backward called before the loss node was recorded")]
    BackwardBeforeForward,
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("loss must be a 1x1 matrix, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("loss mask selects no rows")]
    EmptyMask,
    #[error("non-finite gradient for parameter `{param}` reached the optimizer")]
    NonFiniteGradient { param: String },
}
