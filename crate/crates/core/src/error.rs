use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoralError>;

#[derive(Debug, Error)]
pub enum CoralError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tuple mining failed: {0}")]
    Mining(String),

    #[error("empty database after excluding run {0}")]
    EmptyDatabase(u32),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CoralError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoralError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        CoralError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
