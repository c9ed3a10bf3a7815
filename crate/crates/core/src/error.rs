use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic")]
    BadMagic,

    #[error("payload length mismatch: {0}")]
    PayloadLength(String),

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("malformed header: {0}")]
    Header(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("invalid normalization range: max {max} must exceed min {min}")]
    InvalidRange { min: f64, max: f64 },

    #[error("field has no normalization state")]
    MissingNormState,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("grid {h}x{w} is smaller than the {window}px window")]
    GridTooSmall { h: usize, w: usize, window: usize },

    #[error("no dataset files found under {0}")]
    EmptyDataset(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
