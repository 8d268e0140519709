use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters, dimension mismatches, malformed configs.
    #[error("configuration error: {0}")]
    Config(String),

    /// An argument outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("index error: {0}")]
    Index(String),

    /// Bad input data (non-PSD covariances, too few samples, ...).
    #[error("input error: {0}")]
    Input(String),

    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },

    #[error("chain diverged at iteration {iteration}: |theta| = {norm:e}")]
    Divergence { iteration: u64, norm: f64 },

    #[error("gradient worker failed at index {index}: {message}")]
    Worker { index: usize, message: String },

    /// Violated internal invariant; indicates a bug or a numerically
    /// degenerate parameter combination.
    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
