use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A row that must be L2-normalized has zero (or non-finite) norm.
    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Every sample carries the same value; a two-component mixture is not identifiable.
    #[error("degenerate distribution: {0}")]
    DegenerateDistribution(String),

    /// Training produced a non-finite loss.
    #[error("divergence at epoch {epoch}, batch {batch}: {message}")]
    Divergence {
        epoch: usize,
        batch: usize,
        message: String,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn invalid_config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
