//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A packet does not fit the slot it was assigned to.
    #[error("slot capacity exceeded: {0}")]
    Capacity(String),

    /// A packet has no slot, or the slot plan is inconsistent.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// An iterative solver did not converge within its iteration budget.
    #[error("no convergence: {0}")]
    Convergence(String),

    /// The predictor's input history does not cover the requested horizon.
    #[error("input history error: {0}")]
    History(String),

    /// Scenario configuration is missing, inconsistent, or out of scope.
    #[error("config error: {0}")]
    Config(String),

    /// A recorded trace cannot be played back under the given configuration.
    #[error("playback error: {0}")]
    Playback(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
