use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps these onto exit codes: input/config/io problems exit with 1,
/// numerical and fitting failures with 2.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent caller input (dimension mismatch, non-finite
    /// data, out-of-range arguments).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numerical operation failed beyond recovery (factorization that stays
    /// indefinite after the jitter schedule, non-positive variance estimate).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Hyperparameter or inducing-point optimization failed.
    #[error("fitting failure: {0}")]
    Fit(String),

    /// Bad configuration file or flag combination.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
