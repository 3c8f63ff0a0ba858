use thiserror::Error;

/// Errors raised by the simulation and verification routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure in {what}: residual {residual:e}")]
    Numeric { what: String, residual: f64 },

    #[error("empty jump tail: pi((eps, inf)) = {rate:e} at eps = {eps:e}")]
    EmptyJumpTail { eps: f64, rate: f64 },

    #[error("horizon exhausted: needed {needed}, path reaches {available}")]
    HorizonExhausted { needed: f64, available: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("internal consistency violated: {0}")]
    Consistency(String),

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}
