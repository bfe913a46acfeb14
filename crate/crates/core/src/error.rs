use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate truncation: survival mass {alpha:.3e} is below the resolvable threshold")]
    DegenerateTruncation { alpha: f64 },

    #[error("integrand returned a non-finite value at {point:?}")]
    NonFiniteIntegrand { point: Vec<f64> },

    #[error("quadrature failed: {0}")]
    QuadratureFailure(String),

    #[error(
        "accuracy conflict: quadrature tolerance {quad_tol:.1e} must be at least 100x tighter \
         than the inner solver tolerance {inner_tol:.1e}"
    )]
    AccuracyConflict { quad_tol: f64, inner_tol: f64 },

    #[error("inner Newton solve stagnated after {iters} iterations (residual {residual:.3e})")]
    NewtonStagnation { iters: usize, residual: f64 },

    #[error(
        "paper-invariant violation: the self-moment derivative is numerically singular at {point:?}"
    )]
    SingularSelfMoment { point: Vec<f64> },

    #[error("unsupported truncation for this integration path: {0}")]
    UnsupportedTruncation(String),
}
