//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// An operation that needs at least one element received none.
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    /// An index (class id, vocabulary id, row) out of range.
    #[error("index error in {op}: {detail}")]
    Index { op: &'static str, detail: String },

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed line in a structured text file.
    #[error("format error at line {line}: {detail}")]
    Format { line: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn index(op: &'static str, detail: impl Into<String>) -> Error {
        Error::Index {
            op,
            detail: detail.into(),
        }
    }
}
