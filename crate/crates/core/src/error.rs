use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate stake: {0}")]
    DegenerateStake(String),

    #[error("degenerate softmax: every numerator in column {column} is zero")]
    DegenerateSoftmax { column: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("undefined ASR: every test sample already carries the target label")]
    UndefinedAsr,

    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },

    #[error("ledger error: {0}")]
    Ledger(String),

    #[error("malformed CSV: {0}")]
    MalformedCsv(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    pub(crate) fn config(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
