use thiserror::Error;

pub type Result<T> = std::result::Result<T, CgpdsError>;

#[derive(Debug, Error)]
pub enum CgpdsError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("Cholesky factorization failed for {kernel} Gram matrix (jitter escalated to {jitter:e})")]
    Conditioning { kernel: String, jitter: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("time stamps must be strictly increasing: {0}")]
    Order(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error("non-finite value in {block}: {detail}")]
    Numeric { block: String, detail: String },

    #[error("model state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("model file: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CgpdsError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CgpdsError::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CgpdsError::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        CgpdsError::Input(msg.into())
    }

    pub(crate) fn numeric(block: impl Into<String>, detail: impl Into<String>) -> Self {
        CgpdsError::Numeric {
            block: block.into(),
            detail: detail.into(),
        }
    }
}
