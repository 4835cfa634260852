use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid delay measure: {0}")]
    InvalidMeasure(String),

    #[error("lag {lag} is not a multiple of the grid step {step}")]
    Alignment { lag: f64, step: f64 },

    #[error("{name}: argument {value} outside the domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("condition `{id}` violated (value {value})")]
    ConditionViolated { id: &'static str, value: f64 },

    #[error("ensemble of {requested} values exceeds the memory cap of {cap}")]
    Capacity { requested: usize, cap: usize },

    #[error("regression failed at time step {step}: {reason}")]
    Regression { step: usize, reason: String },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
