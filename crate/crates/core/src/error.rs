use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in `{field}`: {reason}")]
    Format { field: String, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate channel")]
    DegenerateChannel,

    #[error("no propagation paths")]
    NoPaths,

    #[error("non-finite value in state {index} at timestep {t} (max |entry| = {max_abs})")]
    NonFinite { t: usize, max_abs: f64, index: usize },

    #[error("non-finite loss in batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("inference failed in chain {chain}: {reason}")]
    Inference { chain: usize, reason: String },

    #[error("integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("missing file: {0}")]
    Missing(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plotting failed: {0}")]
    Plot(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
