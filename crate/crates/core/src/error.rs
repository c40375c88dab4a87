//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The semi-implicit step matrix could not be factorized.
    #[error("singular step matrix at time step {step}")]
    SingularStep { step: usize },

    /// The Steklov root search could not deliver the requested mode count.
    #[error("branch root search found only {found} of {requested} modes")]
    RootSearch { found: usize, requested: usize },

    /// The search direction has no effect on the state trajectory.
    #[error("line search stagnated: direction lies in the null space of the forward map")]
    Stagnation,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
