use ssvc_autodiff::AutodiffError;
use thiserror::Error;

use crate::checkpoint::CheckpointError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("codebook misalignment at position {position}: token {token} is not a codebook-{expected} code")]
    CodebookMisalignment {
        position: usize,
        token: usize,
        expected: usize,
    },
    #[error("model not ready: {0}")]
    ModelNotReady(String),
    #[error("config: {0}")]
    Config(String),
    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("paired differences have zero variance (mean difference {mean_diff})")]
    ZeroVariance { mean_diff: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
