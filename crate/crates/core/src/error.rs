//! Crate-wide error type.

use std::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, training, decoding and IO.
#[derive(Debug)]
pub enum Error {
    /// Invalid configuration value; the message names the field.
    InvalidConfig(String),
    /// Malformed or insufficient input data.
    Data(String),
    /// Sequence exceeds the model context window.
    SequenceTooLong { len: usize, max: usize },
    /// Token id not in the vocabulary.
    VocabOutOfRange { id: u32, vocab_size: usize },
    /// Mismatched vector/matrix dimensions.
    Shape(String),
    /// Non-finite value encountered in a numeric routine.
    Numeric(String),
    /// Training produced a non-finite loss.
    TrainingDiverged { step: usize },
    /// Serialized file is corrupt, truncated, or has trailing bytes.
    Format(String),
    /// Checkpoint/cache version does not match this build.
    VersionMismatch { found: u32, expected: u32 },
    /// Cache was produced by a different model checkpoint.
    Compatibility(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence of {len} tokens exceeds max_seq_len {max}")
            }
            Error::VocabOutOfRange { id, vocab_size } => {
                write!(f, "token id {id} out of range for vocab of {vocab_size}")
            }
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::TrainingDiverged { step } => {
                write!(f, "training diverged: non-finite loss at step {step}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::VersionMismatch { found, expected } => {
                write!(f, "version mismatch: file has {found}, expected {expected}")
            }
            Error::Compatibility(msg) => write!(f, "compatibility error: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
