use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid anchor: {0}")]
    InvalidAnchor(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {record}: {message}")]
    Parse { record: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("labeling error: {0}")]
    Labeling(String),

    #[error("wiring error: {0}")]
    Wiring(String),

    #[error("freeze violation: {0}")]
    FreezeViolation(String),

    #[error("step {step} has no usable training images")]
    EmptyStep { step: usize },

    #[error("divergence at step {step}, iteration {iteration}: {diagnostics}")]
    Divergence {
        step: usize,
        iteration: usize,
        diagnostics: String,
    },

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
