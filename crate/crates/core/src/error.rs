use thiserror::Error;

/// Errors produced anywhere in the runtime, data-preparation and evaluation paths.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("row {row} has no visible keys")]
    EmptyMaskRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("out-of-order append: index {index} after {last}")]
    OutOfOrder { index: i64, last: i64 },

    #[error("invalid stream: {0}")]
    InvalidStream(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("missing timeline event: {0}")]
    MissingEvent(&'static str),

    #[error("unknown embedding key {0:?}")]
    UnknownEmbedding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
