use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid query: {0}")]
    InvalidQuery(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("training diverged at step {step} (lr {lr:e}): {detail}")]
    Divergence { step: u64, lr: f64, detail: String },

    #[error("non-finite ODE state at t={t} (step {step})")]
    NonFiniteState { t: f64, step: usize },

    #[error("observation out of range: {0}")]
    ObservationOutOfRange(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(what: impl Into<String>) -> Error {
    Error::Shape(what.into())
}

pub(crate) fn invalid(what: impl Into<String>) -> Error {
    Error::InvalidParameter(what.into())
}
