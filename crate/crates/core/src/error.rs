use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaserError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("negative sampling impossible: {0}")]
    Sampling(String),

    #[error("index out of range: {0}")]
    Lookup(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient in {0}; training aborted")]
    NonFinite(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, CaserError>;
