//! Crate-wide error type.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    Shape(String),
    /// An operation produced NaN or infinity; the node id locates it on the tape.
    NonFinite { node_id: usize, op: String },
    /// Misuse of the tape (variable from another tape, non-scalar root, ...).
    Tape(String),
    /// Invalid argument or configuration value.
    Invalid(String),
    /// Underlying filesystem failure.
    Io(io::Error),
    /// Malformed tensor container or dataset file.
    Format(String),
    /// Config file parse error with 1-based line and column.
    Config { line: usize, column: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite { node_id, op } => {
                write!(f, "non-finite output from `{op}` at node {node_id}")
            }
            Error::Tape(msg) => write!(f, "tape error: {msg}"),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Config { line, column, message } => {
                write!(f, "config error at line {line}, column {column}: {message}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
