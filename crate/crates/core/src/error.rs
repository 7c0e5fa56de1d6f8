//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (inverted interval, bad dimensions, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// The simulator produced a non-finite state; the trial must be aborted.
    #[error("simulation diverged at step {step}")]
    SimDiverged { step: usize },

    /// A numerical operation failed (NaN gradient, NaN loss, ...).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint file did not match the expected parameter layout.
    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
