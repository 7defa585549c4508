use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, flags or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    /// Content that is well-formed but violates a data contract (label out of range, size mismatch).
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate vector: {0}")]
    Degenerate(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: String,
        offset: usize,
        msg: String,
    },

    #[error("manifest error in field `{field}`: {msg}")]
    Manifest { field: String, msg: String },

    #[error("planting failed: {0}")]
    Planting(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<String>, offset: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn manifest(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Manifest {
            field: field.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by how the program was invoked rather than by the data it read.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_))
    }
}
