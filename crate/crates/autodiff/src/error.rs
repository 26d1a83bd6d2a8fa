use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {actual} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, actual: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a backward pass")]
    GraphConsumed,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("degenerate vector (norm {norm:e})")]
    DegenerateVector { norm: f32 },
    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
