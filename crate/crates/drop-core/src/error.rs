//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DropError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numerical fault: {0}")]
    Numerical(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate range: {0}")]
    DegenerateRange(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("schema error at line {line}: {msg}")]
    Schema { line: usize, msg: String },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DropError>;
