//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("insufficient frames: have {have}, need {need}")]
    InsufficientFrames { have: usize, need: usize },

    #[error("too few frames for hyperedge construction: T = {0} < 2")]
    TooFewFrames(usize),

    #[error("invalid config: {0}")]
    ConfigInvalid(String),

    #[error("data error: {0}")]
    DataError(String),

    #[error("numeric failure: {0}")]
    NumericFailure(String),

    #[error("horizon out of range: {0}")]
    HorizonOutOfRange(String),

    #[error("step overflow: step {step} past final frame {last}")]
    StepOverflow { step: usize, last: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("checkpoint incompatible: {0}")]
    CheckpointIncompatible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::ConfigInvalid(_) => 2,
            CoreError::MalformedFile { .. }
            | CoreError::ShapeMismatch(_)
            | CoreError::DataError(_)
            | CoreError::EmptyDataset(_)
            | CoreError::InsufficientFrames { .. }
            | CoreError::CheckpointIncompatible(_) => 3,
            CoreError::NonFinite(_) | CoreError::NumericFailure(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
