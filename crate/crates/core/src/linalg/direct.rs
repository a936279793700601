use faer::prelude::*;
use faer::sparse::linalg::solvers::Lu;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;

use super::sparse::CsrMatrix;
use crate::error::{Error, Result};

/// Sparse LU factorization backed by faer.
pub struct SparseLu {
    n: usize,
    lu: Lu<usize, f64>,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu").field("n", &self.n).finish()
    }
}

impl SparseLu {
    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::InvalidArgument(format!("LU of a {}x{} matrix", a.nrows(), a.ncols())));
        }
        let n = a.nrows();
        let triplets: Vec<Triplet<usize, usize, f64>> =
            a.triplets().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
            .map_err(|e| Error::InvalidArgument(format!("sparse matrix construction failed: {e:?}")))?;
        let lu = mat.sp_lu().map_err(|_| Error::SingularMatrix)?;
        let out = Self { n, lu };
        // faer does not report exact singularity; a probe solve catches it.
        let probe = out.solve(&vec![1.0; n]);
        if probe.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        for (i, bi) in b.iter_mut().enumerate() {
            *bi = rhs[(i, 0)];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dense_solve, norm2};

    fn laplacian_1d(n: usize, shift: f64) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 + shift));
            if i > 0 {
                t.push((i, i - 1, -1.0));
            }
            if i + 1 < n {
                t.push((i, i + 1, -1.3));
            }
        }
        CsrMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn matches_dense_solve() {
        let a = laplacian_1d(30, 0.1);
        let b: Vec<f64> = (0..30).map(|i| (i as f64 * 0.7).sin()).collect();
        let xs = SparseLu::factor(&a).unwrap().solve(&b);
        let xd = dense_solve(&a.to_dense(), &b).unwrap();
        let diff: Vec<f64> = xs.iter().zip(&xd).map(|(p, q)| p - q).collect();
        assert!(norm2(&diff) <= 1e-12 * norm2(&xd));
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)]);
        assert!(SparseLu::factor(&a).is_err());
    }
}
