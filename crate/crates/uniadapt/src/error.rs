//! Error types shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two vectors or matrices that must agree on dimension do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// An edit id was inserted into the vector store twice.
    #[error("duplicate edit id {0}")]
    DuplicateEdit(u64),

    /// A shard or layer index is out of range.
    #[error("index {index} out of range (limit {limit})")]
    IndexError { index: usize, limit: usize },

    /// A text file failed to parse; `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },

    /// A binary file has the wrong magic, version, or internal structure.
    #[error("format error: {0}")]
    FormatError(String),

    /// Not enough records to run the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A loss or weight became non-finite.
    #[error("numerical error: {0}")]
    NumericalError(String),

    /// The engine is in a state that forbids the requested operation.
    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A configuration field (or pair of fields) fails validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
