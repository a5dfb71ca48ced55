//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("layer {layer} fully masked at sparsity {sparsity}; lower the sparsity")]
    LayerFullyMasked { layer: usize, sparsity: f32 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("mask bound to backbone {expected:#018x}, got {actual:#018x}")]
    BackboneMismatch { expected: u64, actual: u64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    DataLoad { path: PathBuf, reason: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
