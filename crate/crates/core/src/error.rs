use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants double as the CLI's exit-code classes: [`Error::Usage`] and
/// [`Error::Config`] map to exit code 2, everything else to 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("edit error: {0}")]
    Edit(String),

    #[error("dimension error: expected {expected}, got {actual}")]
    Dimension { expected: String, actual: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by how the program was invoked.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
