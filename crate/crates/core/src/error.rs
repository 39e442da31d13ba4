use thiserror::Error;

pub type Result<T> = std::result::Result<T, SsnnError>;

#[derive(Debug, Error)]
pub enum SsnnError {
    /// A caller broke a documented precondition (shapes, index ranges, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An exact computation would exceed its size guard.
    #[error("resource guard exceeded: {0}")]
    Resource(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("non-finite value in {what} at iteration {iteration}")]
    NonFinite { what: String, iteration: usize },

    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministic { first: f64, second: f64 },

    /// Something that should be impossible by construction happened anyway.
    #[error("diagnostic: {0}")]
    Diagnostic(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SsnnError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SsnnError::Contract(msg.into())
    }

    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        SsnnError::Parse {
            location: location.into(),
            message: message.into(),
        }
    }
}
