use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("index {index} out of range for size {size} in {op}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,

    #[error("attention mask row {row} has no allowed key")]
    EmptyMaskRow { row: usize },

    #[error("invalid head assignment: {0}")]
    Assignment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown task id `{0}`")]
    UnknownTask(String),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("pretraining did not reach accuracy floors within {steps} steps (needle {needle:.3}, local {local:.3})")]
    PretrainBudget {
        steps: usize,
        needle: f64,
        local: f64,
    },

    #[error("checkpoint error at {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("verification failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Stable category used for CLI exit codes and FFI status codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Shape { .. }
            | Error::DataLength { .. }
            | Error::Index { .. }
            | Error::NonScalarLoss(_)
            | Error::EmptyMaskRow { .. }
            | Error::Assignment(_)
            | Error::InvalidArgument(_)
            | Error::UnknownTask(_)
            | Error::GraphConsumed => ErrorCategory::InvalidInput,
            Error::NonFinite { .. } | Error::Diverged { .. } => ErrorCategory::Numeric,
            Error::Config(_) => ErrorCategory::Config,
            Error::PretrainBudget { .. } => ErrorCategory::Training,
            Error::Checkpoint { .. } => ErrorCategory::Checkpoint,
            Error::CheckFailed(_) => ErrorCategory::Verification,
            Error::Io(_) => ErrorCategory::Io,
            Error::Json(_) => ErrorCategory::Config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    InvalidInput,
    Numeric,
    Config,
    Training,
    Checkpoint,
    Io,
    Verification,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::InvalidInput => 2,
            ErrorCategory::Config => 3,
            ErrorCategory::Checkpoint => 4,
            ErrorCategory::Io => 5,
            ErrorCategory::Numeric => 6,
            ErrorCategory::Training => 7,
            ErrorCategory::Verification => 8,
        }
    }
}
