use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size error: {0}")]
    Size(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),

    #[error("invalid label {label} at pixel {index} (num classes {num_classes})")]
    InvalidLabel {
        label: u8,
        index: usize,
        num_classes: usize,
    },

    #[error("invalid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("{path}: format error: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("association error: {0}")]
    Association(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted: {0}")]
    NonFinite(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
