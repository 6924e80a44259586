use thiserror::Error;

/// Errors produced by the search engine and its supporting modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape; reset it before reuse")]
    TapeConsumed,

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cell {cell}: both input gates fall below the pruning threshold")]
    DegenerateCell { cell: usize },

    #[error("cell {cell}: temporal length {length} cannot be halved further")]
    TemporalUnderflow { cell: usize, length: usize },

    #[error("genotype: {0}")]
    Genotype(String),

    #[error("data: {0}")]
    Data(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// True for failures caused by diverging or poisoned numerics.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateCell { .. })
    }

    /// True for failures caused by malformed or insufficient input data.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Data(_) | Error::Csv(_) | Error::Genotype(_) | Error::Checkpoint(_) | Error::Json(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
