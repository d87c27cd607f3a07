use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("vertex {index} lies behind the near plane (depth {depth}, near {near})")]
    NearPlane { index: usize, depth: f64, near: f64 },

    #[error("face {0} has zero area")]
    DegenerateFace(usize),

    #[error("non-finite activation in {0}")]
    NonFinite(String),

    #[error("non-finite loss at iteration {iter}: {breakdown}")]
    Diverged { iter: usize, breakdown: String },

    #[error("dataset too small: {have} samples, need at least {need}")]
    DatasetTooSmall { have: usize, need: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("config line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status for a command that failed with this error:
    /// 1 for bad usage or configuration, 3 for unreadable or malformed
    /// files, 2 for everything that fails during computation.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Invalid(_) | Error::DatasetTooSmall { .. } | Error::ConfigParse { .. } | Error::UnknownKey(_) => 1,
            Error::Io { .. } | Error::Image { .. } | Error::Dataset(_) | Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
