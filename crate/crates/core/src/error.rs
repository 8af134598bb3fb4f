use thiserror::Error;

/// Errors raised by the simulation, regression and verification layers.
#[derive(Debug, Error)]
pub enum SmpError {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{exploded} of {total} paths exploded (limit is 1%)")]
    TooManyExplosions { exploded: usize, total: usize },

    #[error("{bad} of {total} regression targets are non-finite at step {step}")]
    NonFiniteTargets { step: usize, bad: usize, total: usize },

    #[error("{bad} of {total} running-cost evaluations are non-finite")]
    NonFiniteCost { bad: usize, total: usize },

    #[error("noise coupling broken: {0}")]
    NoiseCoupling(String),

    #[error("no stationary Riccati root: {0}")]
    Riccati(String),

    #[error("Picard iteration diverged after {iterations} iterations (residuals {history:?})")]
    PicardDiverged {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SmpError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> SmpError {
    SmpError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
