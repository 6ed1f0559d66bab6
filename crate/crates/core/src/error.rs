use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration and analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid NIfTI file {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("missing input: expected {path}")]
    MissingInput { path: PathBuf },

    #[error("invalid sampling grid: {0}")]
    InvalidGrid(String),

    #[error("singular or non-invertible transform: {0}")]
    SingularTransform(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid label map: {0}")]
    InvalidLabels(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty foreground in {0}")]
    EmptyForeground(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("manifest error in {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn nifti(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Nifti { path: path.into(), reason: reason.into() }
    }
}
