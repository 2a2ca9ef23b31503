use thiserror::Error;

/// Errors produced by the registration, surrogate and calibration stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape representation mismatch: {0}")]
    RepresentationMismatch(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("unsupported representation: {0}")]
    Unsupported(String),

    /// The geodesic integrator produced a non-finite state.
    #[error("geodesic integration failed at step {step}")]
    IntegrationFailure { step: usize },

    #[error("ill-conditioned covariance: {0}")]
    IllConditioned(String),

    #[error("sampler diagnostics: {0}")]
    Diagnostics(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
