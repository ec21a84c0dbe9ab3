use thiserror::Error;

/// Errors surfaced by model validation, sampling, integration and the
/// verification harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("covariance matrix is indefinite (eigenvalue {eigenvalue:.3e} below tolerance)")]
    Indefinite { eigenvalue: f64 },

    #[error("numerical integration did not converge: {0}")]
    IntegrationNonConvergent(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("verification precondition violated: {0}")]
    Verify(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
