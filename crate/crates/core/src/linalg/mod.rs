//! Sparse and dense linear algebra, direct factorizations and Krylov solvers.

mod dense;
mod direct;
mod krylov;
mod sparse;

pub use dense::{dense_eigvals, dense_solve, symmetric_eigenvalues, DenseLu, DenseMatrix};
pub use direct::SparseLu;
pub use krylov::{
    FnOperator, FnPreconditioner,
    fgmres, IdentityPreconditioner, KrylovConfig, KrylovSolution, LinearOperator, Preconditioner,
};
pub use sparse::CsrMatrix;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}
