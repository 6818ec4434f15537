use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("backward: graph was already differentiated, reset it first")]
    BackwardTwice,

    #[error("{0}")]
    InvalidArgument(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{what} at byte offset {offset}: {msg}")]
    Format {
        what: &'static str,
        offset: u64,
        msg: String,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
