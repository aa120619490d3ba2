use thiserror::Error;

use crate::strategies::StrategyKind;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid dimensions, counts, or numeric settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (shape mismatch, bad payload).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("key not found: {0}")]
    KeyNotFound(String),

    /// A protocol invariant failed while running a round.
    #[error("protocol error in {strategy} at round {round}, {actor}: {detail}")]
    Protocol {
        strategy: StrategyKind,
        round: u64,
        actor: String,
        detail: String,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
