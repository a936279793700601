use std::ops::{Index, IndexMut};

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(nrows * ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { nrows, ncols, data }
    }

    pub fn from_fn(nrows: usize, ncols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(nrows, ncols);
        for i in 0..nrows {
            for j in 0..ncols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        (0..self.nrows).map(|i| super::dot(self.row(i), x)).collect()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.ncols, other.nrows);
        let mut out = DenseMatrix::zeros(self.nrows, other.ncols);
        for i in 0..self.nrows {
            for k in 0..self.ncols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.ncols..(i + 1) * other.ncols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.ncols, self.nrows, |i, j| self[(j, i)])
    }

    pub fn max_abs(&self) -> f64 {
        super::max_abs(&self.data)
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.nrows, self.ncols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.ncols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.ncols + j]
    }
}

/// LU factorization with partial pivoting.
#[derive(Debug, Clone)]
pub struct DenseLu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl DenseLu {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if a.nrows != a.ncols {
            return Err(Error::InvalidArgument(format!("LU of a {}x{} matrix", a.nrows, a.ncols)));
        }
        let n = a.nrows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.max_abs();
        let tiny = scale * f64::EPSILON * n.max(1) as f64;
        for k in 0..n {
            let (p, pval) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pval <= tiny || pval == 0.0 {
                return Err(Error::SingularMatrix);
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let l = lu[i * n + k] / pivot;
                lu[i * n + k] = l;
                if l != 0.0 {
                    for j in k + 1..n {
                        lu[i * n + j] -= l * lu[k * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = &self.lu[i * n..i * n + i];
            y[i] -= super::dot(row, &y[..i]);
        }
        for i in (0..n).rev() {
            let row = &self.lu[i * n + i + 1..(i + 1) * n];
            let s = super::dot(row, &y[i + 1..]);
            y[i] = (y[i] - s) / self.lu[i * n + i];
        }
        b.copy_from_slice(&y);
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Solves `a x = b` by partially pivoted LU.
pub fn dense_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(DenseLu::factor(a)?.solve(b))
}

/// Eigenvalues of a symmetric matrix in ascending order. Only the lower
/// triangle is read.
pub fn symmetric_eigenvalues(a: &DenseMatrix) -> Vec<f64> {
    let mut vals: Vec<f64> = a.to_nalgebra().symmetric_eigenvalues().iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Eigenvalues of a general square matrix.
pub fn dense_eigvals(a: &DenseMatrix) -> Vec<Complex<f64>> {
    a.to_nalgebra().complex_eigenvalues().iter().copied().collect()
}
