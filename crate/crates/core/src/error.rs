//! Error type shared across the crate.

use std::fmt;

/// Crate-wide error kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Shape(String),
    /// Token or expert index out of range.
    Index(String),
    /// Invalid configuration value or unknown key.
    Config(String),
    /// Corpus ingestion failure (missing, empty, or too short).
    Ingest(String),
    /// Operation not supported for the given kind or mode.
    Unsupported(String),
    /// Checkpoint serialization or parsing failure.
    Checkpoint(String),
    /// Statistics input failure (too few samples, misaligned vectors).
    Stats(String),
    /// Training aborted (non-finite loss or similar).
    Train(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape: {m}"),
            Error::Index(m) => write!(f, "index: {m}"),
            Error::Config(m) => write!(f, "config: {m}"),
            Error::Ingest(m) => write!(f, "ingest: {m}"),
            Error::Unsupported(m) => write!(f, "unsupported: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint: {m}"),
            Error::Stats(m) => write!(f, "stats: {m}"),
            Error::Train(m) => write!(f, "train: {m}"),
            Error::Io(m) => write!(f, "io: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
