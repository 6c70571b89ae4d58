use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("integration failed at t = {time:.3} fs: {reason}")]
    Integration { time: f64, reason: String },

    #[error("value {value} outside [0, 1] population domain")]
    Domain { value: f64 },

    #[error("degenerate column {column}: {reason}")]
    DegenerateColumn { column: usize, reason: String },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("unexpected CSV header: expected `{expected}`, got `{actual}`")]
    Header { expected: String, actual: String },

    #[error("dataset row {row} failed: {source}")]
    Generation {
        row: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
