use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// A parameter left the support of the prior (or the model's admissible set).
    #[error("outside the prior support: {0}")]
    Domain(String),

    #[error("non-finite value in Runge-Kutta stage K{stage}")]
    Overflow { stage: usize },

    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("step refinement did not reach tolerance {tol:e} with {substeps} substeps (last difference {diff:e})")]
    NotConverged { tol: f64, substeps: usize, diff: f64 },

    #[error("matrix is not positive definite (first failing pivot at index {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("eigendecomposition failed: {0}")]
    Eigen(String),

    #[error("optimization stalled after {sweeps} sweeps (objective {objective}, gradient sup norm {grad_norm:e})")]
    Stalled { sweeps: usize, objective: f64, grad_norm: f64 },

    #[error("chain failed to mix: acceptance rate {rate:.4} after burn-in")]
    Mixing { rate: f64 },

    #[error("credible band: {dropped} of {count} sample curves failed to integrate")]
    Band { dropped: usize, count: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
