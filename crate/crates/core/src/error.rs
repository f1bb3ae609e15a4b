use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("reduction over an empty set in {op}")]
    EmptyReduction { op: &'static str },
    #[error("axis {axis} invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("grad requires a single-element scalar, got shape {shape:?}")]
    NonScalar { shape: Vec<usize> },
    #[error("tensor is not attached to a tape")]
    Detached,
    #[error("tensors live on different tapes")]
    TapeMismatch,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("labels contain a single class only")]
    SingleClass,
    #[error("label must be 0 or 1, got {0}")]
    BadLabel(f64),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
