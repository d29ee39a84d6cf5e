use thiserror::Error;

/// Errors produced by the solver stack.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid harmonic grid: {0}")]
    InvalidGrid(String),

    #[error("invalid resonance spec: {0}")]
    InvalidSpec(String),

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("time sampling too coarse: {0}")]
    Aliasing(String),

    #[error("Newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular Jacobian in linear solve")]
    SingularJacobian,

    #[error("continuation stalled: {0}")]
    Stall(String),

    #[error("degenerate seed: {0}")]
    DegenerateSeed(String),

    #[error("eigenvalue solve failed: {0}")]
    EigenFailure(String),

    #[error("trajectory diverged: {0}")]
    Divergence(String),

    #[error("trajectory not steady: {0}")]
    NotSteady(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
