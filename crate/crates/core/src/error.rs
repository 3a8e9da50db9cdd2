use std::io;

use thiserror::Error;

/// Dataset and checkpoint file decoding failures.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {found} (expected {expected})")]
    Version { expected: u16, found: u16 },
    #[error("truncated record: {0}")]
    Truncated(String),
    #[error("count mismatch: header says {declared}, file holds {found}")]
    CountMismatch { declared: usize, found: usize },
    #[error("malformed file: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// Violated shape or value precondition.
    #[error("contract violation at {node}: {message}")]
    Contract { node: String, message: String },
    #[error("non-finite value produced at {node}")]
    Numeric { node: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(node: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Contract {
            node: node.into(),
            message: message.into(),
        }
    }

    pub fn numeric(node: impl Into<String>) -> Self {
        Error::Numeric { node: node.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
