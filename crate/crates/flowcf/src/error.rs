use thiserror::Error;

/// Unified error type for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data, carrying the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Invalid configuration or invalid argument combinations.
    #[error("config error: {0}")]
    Config(String),

    /// Incompatible matrix or layer dimensions.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Malformed or incompatible checkpoint file.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Data-level contract violation (e.g. exhausted sampling pool).
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure (non-finite values where finite ones are required).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code the CLI maps this error to: 2 for usage/config mistakes,
    /// 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}
