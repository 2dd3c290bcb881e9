//! Crate-wide error type. Shape violations carry enough context to name the
//! offending operation and dimensions, since most callers surface them directly.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes cannot be combined.
    #[error("{op}: shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// An argument violated an operation's precondition (bad axis, zero-sized
    /// dimension, out-of-range index, ...).
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    /// A differentiable graph was used incorrectly (double backward,
    /// non-scalar loss, missing gradient).
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// The optimizer was asked to update a parameter that has no gradient.
    #[error("optimizer: parameter '{0}' has no accumulated gradient")]
    MissingGradient(String),

    /// A non-finite value surfaced where the pipeline requires finite math.
    /// `last_good` names the most recent usable checkpoint, when one exists.
    #[error("numeric failure: {msg}")]
    Numeric {
        msg: String,
        last_good: Option<std::path::PathBuf>,
    },

    /// Serialized artifacts (datasets, checkpoints, manifests) that do not
    /// parse, or that fail validation after parsing.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric {
            msg: msg.into(),
            last_good: None,
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
