use thiserror::Error;

/// Errors produced by the draft-attention library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("duplicate index {index} in permutation (not a bijection)")]
    DuplicateIndex { index: usize },

    #[error("index {index} out of range for permutation of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid keep ratio {0}: must satisfy 0 < r <= 1")]
    KeepRatio(f64),

    #[error("invalid sparsity {0}: must satisfy 0 <= sparsity < 1")]
    Sparsity(f64),

    #[error("invalid scale {0}: must be positive and finite")]
    Scale(f64),

    #[error("matrix file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
