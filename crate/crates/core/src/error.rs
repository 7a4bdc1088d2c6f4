use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("component index {index} out of range for n = {n}")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("outcome space has {count} outcomes, enumeration limit is {limit}")]
    EnumerationTooLarge { count: u128, limit: u128 },

    #[error("step size {eta_max} is not admissible: need eta_max < 2/(L*B) = {ceiling}")]
    Inadmissible { eta_max: f64, ceiling: f64 },

    #[error("step index {k} is past the cosine horizon {horizon}")]
    PastHorizon { k: usize, horizon: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("every run in the ensemble diverged ({runs} runs)")]
    AllDiverged { runs: usize },

    #[error("rate fit: {0}")]
    RateFit(String),

    #[error("config {path}: {message}")]
    Config { path: String, message: String },

    #[error("report: {0}")]
    Report(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
