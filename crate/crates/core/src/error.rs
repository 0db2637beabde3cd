//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, reported with both operand shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input outside an operation's domain (non-positive time step,
    /// out-of-range token id, empty video, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite values where finite arithmetic is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration or command usage.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed input file; `offset` is the byte position of the failure.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data/parse, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Shape(_) | Error::Domain(_) | Error::Parse { .. } | Error::Io(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}
