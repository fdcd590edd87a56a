use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not agree. `axis` names the offending axis.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        found: String,
    },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed input text.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("unknown motion generator `{0}`")]
    UnknownGenerator(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    /// Binary file with the wrong magic or truncated content.
    #[error("{path}: invalid file format: {message}")]
    Format { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl ToString,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
