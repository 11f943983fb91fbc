use thiserror::Error;

/// Failures raised by the solvers and the control/audit layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid grid, mask, weight or control configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Argument outside the domain where a quantity is defined (e.g. a
    /// Carleman weight evaluated at a singular time).
    #[error("domain error: {0}")]
    Domain(String),

    /// Two objects built on different grids were combined.
    #[error("grid mismatch: expected {expected} nodes, got {got}")]
    GridMismatch { expected: usize, got: usize },

    /// A banded factorization hit a (near) zero pivot.
    #[error("singular banded system: pivot {index} has magnitude {magnitude:e}")]
    SingularSystem { index: usize, magnitude: f64 },

    /// An inner or outer fixed-point iteration did not converge.
    #[error("{stage} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        stage: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// Outer nonlinear loop diverged.
    #[error("outer iteration diverged: {0}")]
    Divergence(String),

    /// Malformed weight expression.
    #[error("malformed weight spec: {0}")]
    WeightSpec(String),
}

impl Error {
    /// True for the errors that originate in the numerics rather than in
    /// the caller's inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::SingularSystem { .. } | Error::NonConvergence { .. } | Error::Divergence(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
