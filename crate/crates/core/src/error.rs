use thiserror::Error;

/// Errors raised by the discretization and solver layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("matrix is singular to working precision")]
    SingularMatrix,

    #[error("Krylov solver did not converge in {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("momentum solver failed: {0}")]
    MomentumSolver(String),

    #[error("preconditioner failed: {0}")]
    Preconditioner(String),

    #[error("volume-multiplier Schur complement is degenerate ({0:.3e})")]
    DegenerateMultiplier(f64),

    #[error("division by zero diagonal entry {0} of C_mu")]
    ZeroDiagonal(usize),

    #[error("deflation breakdown: scaling denominator {0:.3e}")]
    DeflationBreakdown(f64),

    #[error("nonlinear solve failed: {0}")]
    NonlinearFailure(String),
}

pub type Result<T> = std::result::Result<T, Error>;
