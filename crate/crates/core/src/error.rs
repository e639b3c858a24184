use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor operations and the autodiff tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank { op: &'static str, expected: usize, got: Vec<usize> },
    #[error("{op}: sequence length {len} is shorter than the minimum {min}")]
    TooShort { op: &'static str, len: usize, min: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("graph already consumed by a previous backward pass; run the forward pass again")]
    GraphConsumed,
    #[error("variable does not belong to the current graph")]
    StaleVar,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Errors from the data layer: recording files, manifests, synthetic specs, folds.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: bad magic at offset {offset}")]
    BadMagic { path: PathBuf, offset: u64 },
    #[error("{path}: unsupported version {version} at offset {offset}")]
    BadVersion { path: PathBuf, version: u32, offset: u64 },
    #[error("{path}: truncated payload at offset {offset} (expected {expected} bytes, found {found})")]
    Truncated { path: PathBuf, offset: u64, expected: u64, found: u64 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid recording: {0}")]
    InvalidRecording(String),
    #[error("cannot build folds: {0}")]
    Folds(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

/// Errors from model construction, checkpoints, training and evaluation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl ModelError {
    /// True when the failure is numeric divergence rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Self::Diverged { .. } | Self::Tensor(TensorError::NonFinite { .. }))
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Self::Data(DataError::Io { .. }) | Self::Checkpoint(_))
    }
}
