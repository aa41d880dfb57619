use thiserror::Error;

use crate::recover::Decomposition;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed case text. `line` is 1-based.
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Well-formed input that violates a model invariant.
    #[error("invalid case: {0}")]
    Validation(String),

    #[error("network is not observable: {0}")]
    Observability(String),

    /// A caller broke an operation's precondition (dimensions, ranges).
    #[error("{0}")]
    Contract(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The low-rank recovery inside an attack did not reach its tolerance.
    #[error("solver stopped after {} iterations without converging", .partial.iterations)]
    NotConverged { partial: Box<Decomposition> },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by bad input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation(_) | Error::Contract(_) | Error::Config(_))
    }
}
