use super::dense::DenseMatrix;
use super::krylov::LinearOperator;

/// Compressed sparse row matrix with sorted, unique column indices per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, row_ptr: vec![0; nrows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diagonal(&vec![1.0; n])
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        let n = d.len();
        Self { nrows: n, ncols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: d.to_vec() }
    }

    /// Builds a matrix from `(row, col, value)` triplets; duplicates are
    /// summed in the order given.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; nrows + 1];
        for &(i, j, _) in triplets {
            assert!(i < nrows && j < ncols, "triplet ({i}, {j}) outside {nrows}x{ncols}");
            counts[i + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let mut order = vec![0usize; triplets.len()];
        let mut next = counts.clone();
        for (k, &(i, _, _)) in triplets.iter().enumerate() {
            order[next[i]] = k;
            next[i] += 1;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        let mut row: Vec<(usize, f64)> = Vec::new();
        for i in 0..nrows {
            row.clear();
            row.extend(order[counts[i]..counts[i + 1]].iter().map(|&k| (triplets[k].1, triplets[k].2)));
            // stable sort keeps the summation order of duplicates deterministic
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn from_dense(a: &DenseMatrix) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t)
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    fn row_mut(&mut self, i: usize) -> (&[usize], &mut [f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &mut self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        super::max_abs(&self.values)
    }

    /// `y = A x`
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&j, v)| v * x[j]).sum();
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_into(x, &mut y);
        y
    }

    /// `y = A^T x`
    pub fn transpose_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let (cols, vals) = self.row(i);
            for (&j, v) in cols.iter().zip(vals) {
                y[j] += v * xi;
            }
        }
        y
    }

    pub fn transpose(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            t.extend(cols.iter().zip(vals).map(|(&j, &v)| (j, i, v)));
        }
        Self::from_triplets(self.ncols, self.nrows, &t)
    }

    /// `self + alpha * other`
    pub fn add(&self, alpha: f64, other: &CsrMatrix) -> Self {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::with_capacity(self.nnz() + other.nnz());
        let mut values = Vec::with_capacity(self.nnz() + other.nnz());
        row_ptr.push(0);
        for i in 0..self.nrows {
            let (ca, va) = self.row(i);
            let (cb, vb) = other.row(i);
            let (mut p, mut q) = (0, 0);
            while p < ca.len() || q < cb.len() {
                let next_a = ca.get(p).copied().unwrap_or(usize::MAX);
                let next_b = cb.get(q).copied().unwrap_or(usize::MAX);
                if next_a == next_b {
                    col_idx.push(next_a);
                    values.push(va[p] + alpha * vb[q]);
                    p += 1;
                    q += 1;
                } else if next_a < next_b {
                    col_idx.push(next_a);
                    values.push(va[p]);
                    p += 1;
                } else {
                    col_idx.push(next_b);
                    values.push(alpha * vb[q]);
                    q += 1;
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows: self.nrows, ncols: self.ncols, row_ptr, col_idx, values }
    }

    pub fn scale(&self, alpha: f64) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    /// `A diag(s)`
    pub fn scale_columns(&self, s: &[f64]) -> Self {
        assert_eq!(s.len(), self.ncols);
        let mut out = self.clone();
        for (v, &j) in out.values.iter_mut().zip(&out.col_idx) {
            *v *= s[j];
        }
        out
    }

    /// Sparse product `self * other`.
    pub fn matmul(&self, other: &CsrMatrix) -> Self {
        assert_eq!(self.ncols, other.nrows);
        let mut acc = vec![0.0; other.ncols];
        let mut mark = vec![usize::MAX; other.ncols];
        let mut pattern: Vec<usize> = Vec::new();
        let mut row_ptr = Vec::with_capacity(self.nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..self.nrows {
            pattern.clear();
            let (ca, va) = self.row(i);
            for (&k, &a) in ca.iter().zip(va) {
                let (cb, vb) = other.row(k);
                for (&j, &b) in cb.iter().zip(vb) {
                    if mark[j] != i {
                        mark[j] = i;
                        acc[j] = 0.0;
                        pattern.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            pattern.sort_unstable();
            for &j in &pattern {
                col_idx.push(j);
                values.push(acc[j]);
            }
            row_ptr.push(col_idx.len());
        }
        Self { nrows: self.nrows, ncols: other.ncols, row_ptr, col_idx, values }
    }

    /// Zeroes every row `i` with `mask[i]`.
    pub fn zero_rows(&mut self, mask: &[bool]) {
        assert_eq!(mask.len(), self.nrows);
        for i in 0..self.nrows {
            if mask[i] {
                self.row_mut(i).1.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Zeroes every column `j` with `mask[j]`.
    pub fn zero_cols(&mut self, mask: &[bool]) {
        assert_eq!(mask.len(), self.ncols);
        for (v, &j) in self.values.iter_mut().zip(&self.col_idx) {
            if mask[j] {
                *v = 0.0;
            }
        }
    }

    /// Replaces the rows and columns flagged in `mask` by those of the
    /// identity. The diagonal entry must be in the sparsity pattern.
    pub fn apply_identity_rows_cols(&mut self, mask: &[bool]) {
        assert_eq!(self.nrows, self.ncols);
        self.zero_rows(mask);
        self.zero_cols(mask);
        for i in 0..self.nrows {
            if mask[i] {
                let k = self.row(i).0.binary_search(&i).expect("diagonal entry missing from pattern");
                let start = self.row_ptr[i];
                self.values[start + k] = 1.0;
            }
        }
    }

    /// Drops explicit zeros from the pattern.
    pub fn prune(&self) -> Self {
        let mut t = Vec::with_capacity(self.nnz());
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            t.extend(cols.iter().zip(vals).filter(|(_, &v)| v != 0.0).map(|(&j, &v)| (i, j, v)));
        }
        Self::from_triplets(self.nrows, self.ncols, &t)
    }

    /// Dense submatrix on the index set `idx` (rows and columns).
    pub fn principal_submatrix(&self, idx: &[usize]) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            let (cols, vals) = self.row(i);
            for (b, &j) in idx.iter().enumerate() {
                if let Ok(k) = cols.binary_search(&j) {
                    out[(a, b)] = vals[k];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j)] = v;
            }
        }
        out
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        self.triplets().map(|(i, j, v)| (v - self.get(j, i)).abs()).fold(0.0, f64::max)
    }
}

impl LinearOperator for CsrMatrix {
    fn nrows(&self) -> usize {
        self.nrows
    }

    fn ncols(&self) -> usize {
        self.ncols
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matvec_into(x, y);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_sparse(n: usize, m: usize, entries: &[(usize, usize, f64)]) -> CsrMatrix {
        let t: Vec<_> = entries.iter().map(|&(i, j, v)| (i % n, j % m, v)).collect();
        CsrMatrix::from_triplets(n, m, &t)
    }

    proptest! {
        #[test]
        fn matvec_matches_dense(
            entries in prop::collection::vec((0usize..8, 0usize..6, -1.0f64..1.0), 0..40),
            x in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let a = random_sparse(8, 6, &entries);
            let d = a.to_dense();
            let ys = a.matvec(&x);
            let yd = d.matvec(&x);
            for (p, q) in ys.iter().zip(&yd) {
                prop_assert!((p - q).abs() <= 1e-13);
            }
            let xt: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
            let yt = a.transpose_matvec(&xt);
            let ytd = a.transpose().matvec(&xt);
            for (p, q) in yt.iter().zip(&ytd) {
                prop_assert!((p - q).abs() <= 1e-13);
            }
        }

        #[test]
        fn product_and_sum_match_dense(
            ea in prop::collection::vec((0usize..5, 0usize..4, -1.0f64..1.0), 0..20),
            eb in prop::collection::vec((0usize..4, 0usize..5, -1.0f64..1.0), 0..20),
        ) {
            let a = random_sparse(5, 4, &ea);
            let b = random_sparse(4, 5, &eb);
            let p = a.matmul(&b).to_dense();
            let pd = a.to_dense().matmul(&b.to_dense());
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert!((p[(i, j)] - pd[(i, j)]).abs() <= 1e-13);
                }
            }
            let s = a.add(-2.0, &a).to_dense();
            for i in 0..5 {
                for j in 0..4 {
                    prop_assert!((s[(i, j)] + a.get(i, j)).abs() <= 1e-13);
                }
            }
        }
    }

    #[test]
    fn duplicates_are_summed() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (0, 1, 2.0), (1, 0, -1.0)]);
        assert_eq!(a.nnz(), 2);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 1), 0.0);
    }

    #[test]
    fn identity_rows_and_columns() {
        let mut a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 2.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 3.0), (2, 2, 4.0)]);
        a.apply_identity_rows_cols(&[false, true, false]);
        assert_eq!(a.get(1, 1), 1.0);
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.get(1, 0), 0.0);
        assert_eq!(a.get(0, 0), 2.0);
    }
}
