use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed interchange document.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Document is well-formed but violates a graph invariant.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric error in {layer}: non-finite value")]
    Numeric { layer: String },

    #[error("training diverged at epoch {epoch}, batch {batch} (loss = {loss})")]
    Divergence {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    #[error("registry format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt registry entry {id}: {reason}")]
    Corruption { id: String, reason: String },

    #[error("registry is empty")]
    EmptyRegistry,

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    /// True for failures that happen inside a computation (training,
    /// forward pass) rather than while reading user input.
    pub fn is_computation(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Divergence { .. })
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}
