use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid too small for stencil: {height}x{width}, need at least {min}x{min}")]
    GridTooSmall {
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("loss must be a scalar (1x1), got {0}x{1}")]
    NonScalarLoss(usize, usize),

    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
