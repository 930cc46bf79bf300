//! Crate-wide error type.
//!
//! Every fallible public operation returns [`Result`]. Variants are grouped
//! by how callers are expected to react: shape/argument/config errors are
//! caller bugs or bad inputs, format errors come from on-disk artifacts, and
//! diagnostic errors mean a training sanity gate failed (broken task or
//! configuration rather than a programming error).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible matrix or vector shapes; names both sides.
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    /// A value outside an operation's domain (empty input, bad rank, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Inconsistent run configuration (site coverage, label spaces, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed on-disk artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Artifact written by an incompatible format version.
    #[error("format version mismatch: found {found:?}, expected {expected:?}")]
    VersionMismatch { found: String, expected: String },

    /// Artifact does not belong to the model it is being loaded against.
    #[error("model hash mismatch: file has {found}, target is {expected}")]
    HashMismatch { found: String, expected: String },

    /// Artifact payload shorter than its header promises.
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    /// Numerically degenerate input (all-zero features, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A training sanity gate failed; the task or config is broken.
    #[error("training diagnostic: {0}")]
    Diagnostic(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
