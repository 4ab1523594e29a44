use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {0} has zero norm and cannot be projected onto the sphere")]
    ZeroNormRow(usize),
    #[error("row {row} has norm {norm}, expected 1 within 1e-6")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("similarity {0} lies outside [-1, 1]")]
    SimilarityOutOfRange(f64),
    #[error("a logits row needs at least one negative")]
    EmptyNegatives,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("in-batch contrast needs at least 2 instances, got {0}")]
    BatchTooSmall(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("empty grid")]
    EmptyGrid,
    #[error("grid must be positive and strictly increasing")]
    InvalidGrid,
    #[error("loss evaluated to a non-finite value at probe {0}")]
    NonFiniteProbe(usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("encoder output row {row} has zero norm (ZeroNormRow) or is not finite")]
    NonFiniteOutput { row: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("malformed record file: length {len} is not a multiple of {record}")]
    MalformedRecord { len: usize, record: usize },
    #[error("label {label} at record {index} is out of range")]
    LabelOutOfRange { index: usize, label: u8 },
    #[error("index {index} out of range for {len} records")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
