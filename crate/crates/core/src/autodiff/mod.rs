//! Dense reverse-mode automatic differentiation over `f64` tensors, plus the
//! Adam optimizer and a plateau learning-rate schedule.

mod gemm;
mod optim;
mod params;
mod tape;
mod tensor;

pub use optim::{Adam, PlateauScheduler};
pub use params::{ParamId, ParamStore};
pub use tape::{AttentionMask, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("loss does not depend on any tracked value")]
    Detached,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
