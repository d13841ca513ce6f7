use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// The estimated laws admit no coupling satisfying the listed constraints.
    #[error("constraints {labels:?} cannot be satisfied by any coupling of the estimated laws")]
    InconsistentConstraints { labels: Vec<String> },

    /// An iterative routine ran out of iterations.
    #[error("iteration limit reached: {0}")]
    IterationLimit(String),

    /// Numerical breakdown (singular systems, non-finite intermediate values).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
