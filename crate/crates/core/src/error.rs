use thiserror::Error;

/// Errors raised by model construction, fitting, prediction and I/O.
#[derive(Debug, Error)]
pub enum MemoeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix decomposition failed: {0}")]
    Decomposition(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("data error at row {row}, column '{column}': {message}")]
    Data {
        row: usize,
        column: String,
        message: String,
    },

    #[error("subject '{subject}': {message}")]
    Subject { subject: String, message: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("model archive: {0}")]
    Archive(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MemoeError>;
