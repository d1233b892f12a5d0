//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("signal too short: {len} samples, need at least {min}")]
    SignalTooShort { len: usize, min: usize },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite gradient in parameter class `{class}`")]
    NonFiniteGradient { class: &'static str },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("score model transport: {0}")]
    Score(#[from] ScoreTransportError),

    #[error("wav {path}: {msg}")]
    Wav { path: String, msg: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("diffusion step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Tag an error with the reverse-diffusion step index it occurred at.
    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep {
            step,
            source: Box::new(self),
        }
    }
}

/// Failures of the external score-model wire protocol. Each condition is a
/// distinct variant so callers can react to timeouts and protocol violations
/// differently.
#[derive(Debug, Error)]
pub enum ScoreTransportError {
    #[error("handshake failed: {0}")]
    Handshake(String),

    #[error("request timed out after {0:.1}s")]
    Timeout(f64),

    #[error("malformed frame: {0}")]
    MalformedFrame(String),

    #[error("score length mismatch: sent {sent}, received {received}")]
    LengthMismatch { sent: usize, received: usize },

    #[error("peer reported error code {0}")]
    PeerError(u32),

    #[error("peer exited unexpectedly{0}")]
    PeerExited(String),

    #[error("failed to spawn peer `{cmd}`: {msg}")]
    Spawn { cmd: String, msg: String },
}
