use std::path::PathBuf;

/// Errors produced by the distillation lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    InvalidToken { token: u32, vocab: usize },

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    /// The reference distribution assigns zero mass where the other one does not.
    #[error("divergence is infinite: token {token} has zero probability under the reference distribution")]
    InfiniteDivergence { token: usize },

    #[error("token {token} has zero probability; log-ratio is undefined")]
    ZeroProbability { token: usize },

    #[error("enumeration needs {required} sequences but the budget is {budget}")]
    BudgetExceeded { required: u128, budget: u64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("curriculum is no longer running (status {0})")]
    CurriculumStopped(String),

    #[error("malformed policy file: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
