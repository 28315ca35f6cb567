use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (widths, counts, missing pyramid levels, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or vector dimensions do not line up.
    #[error("shape mismatch: {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A record refers to something that does not exist (camera id, ego segment, kernel).
    #[error("unresolved reference: {0}")]
    Reference(String),

    /// An input value violates a documented invariant.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A binary or text file does not follow its format.
    #[error("malformed {format}: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            what,
            expected,
            actual,
        }
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            format,
            reason: reason.into(),
        }
    }
}
