use super::{axpy, dot, norm2, DenseLu, SparseLu};
use crate::error::{Error, Result};

/// A square or rectangular linear map applied to vectors.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`; `y` is overwritten.
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

/// Wraps a closure as a [`LinearOperator`].
pub struct FnOperator<F> {
    n: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64])> FnOperator<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&[f64], &mut [f64])> LinearOperator for FnOperator<F> {
    fn nrows(&self) -> usize {
        self.n
    }
    fn ncols(&self) -> usize {
        self.n
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.f)(x, y)
    }
}

/// Approximate inverse applied once per Krylov iteration. It may change
/// between applications.
pub trait Preconditioner {
    /// `z ≈ A^{-1} r`; `z` is overwritten.
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPreconditioner;

impl Preconditioner for IdentityPreconditioner {
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()> {
        z.copy_from_slice(r);
        Ok(())
    }
}

impl Preconditioner for DenseLu {
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()> {
        z.copy_from_slice(r);
        self.solve_in_place(z);
        Ok(())
    }
}

impl Preconditioner for SparseLu {
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()> {
        z.copy_from_slice(r);
        self.solve_in_place(z);
        Ok(())
    }
}

/// Wraps a closure as a [`Preconditioner`].
pub struct FnPreconditioner<F>(pub F);

impl<F: FnMut(&[f64], &mut [f64]) -> Result<()>> Preconditioner for FnPreconditioner<F> {
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()> {
        (self.0)(r, z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovConfig {
    pub atol: f64,
    pub rtol: f64,
    pub max_iter: usize,
    nullspace: Vec<Vec<f64>>,
}

impl Default for KrylovConfig {
    fn default() -> Self {
        Self { atol: 1e-7, rtol: 1e-7, max_iter: 500, nullspace: Vec::new() }
    }
}

impl KrylovConfig {
    pub fn new(atol: f64, rtol: f64, max_iter: usize) -> Result<Self> {
        if !(atol > 0.0 && rtol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerances must be positive, got atol={atol}, rtol={rtol}")));
        }
        Ok(Self { atol, rtol, max_iter, nullspace: Vec::new() })
    }

    /// Sets the nullspace basis; the vectors are orthonormalized here.
    pub fn with_nullspace(mut self, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(vectors.len());
        for mut v in vectors {
            for _ in 0..2 {
                for q in &basis {
                    let c = dot(q, &v);
                    axpy(-c, q, &mut v);
                }
            }
            let nv = norm2(&v);
            if nv < 1e-12 {
                return Err(Error::InvalidArgument("nullspace vectors are linearly dependent".into()));
            }
            v.iter_mut().for_each(|x| *x /= nv);
            basis.push(v);
        }
        self.nullspace = basis;
        Ok(self)
    }

    pub fn nullspace(&self) -> &[Vec<f64>] {
        &self.nullspace
    }

    /// Removes the nullspace components of `v`.
    pub fn project(&self, v: &mut [f64]) {
        for q in &self.nullspace {
            let c = dot(q, v);
            axpy(-c, q, v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrylovSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// Residual norm estimates, starting with the initial residual.
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

impl KrylovSolution {
    pub fn final_residual(&self) -> f64 {
        *self.residual_history.last().unwrap_or(&0.0)
    }

    /// Turns a non-converged solve into an error.
    pub fn ensure_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence { iterations: self.iterations, residual: self.final_residual() })
        }
    }
}

/// Right-preconditioned flexible GMRES without restarts.
///
/// Stops once the residual estimate drops to `max(atol, rtol * |b|)` or after
/// `max_iter` iterations. Hitting the cap is not an error; the best iterate is
/// returned with `converged == false`.
pub fn fgmres(
    op: &dyn LinearOperator,
    b: &[f64],
    pc: &mut dyn Preconditioner,
    x0: Option<&[f64]>,
    cfg: &KrylovConfig,
) -> Result<KrylovSolution> {
    let n = b.len();
    if op.nrows() != n || op.ncols() != n {
        return Err(Error::InvalidArgument(format!(
            "operator is {}x{} but rhs has length {n}",
            op.nrows(),
            op.ncols()
        )));
    }
    if let Some(q) = cfg.nullspace.iter().find(|q| q.len() != n) {
        return Err(Error::InvalidArgument(format!("nullspace vector of length {} for size {n}", q.len())));
    }
    let bnorm = norm2(b);
    if bnorm == 0.0 {
        return Ok(KrylovSolution { x: vec![0.0; n], iterations: 0, residual_history: vec![0.0], converged: true });
    }
    let tol = cfg.atol.max(cfg.rtol * bnorm);

    let mut x = match x0 {
        Some(x0) => {
            assert_eq!(x0.len(), n);
            x0.to_vec()
        }
        None => vec![0.0; n],
    };
    cfg.project(&mut x);
    let mut r = vec![0.0; n];
    op.apply(&x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    cfg.project(&mut r);
    let beta = norm2(&r);
    let mut history = vec![beta];
    if beta <= tol {
        return Ok(KrylovSolution { x, iterations: 0, residual_history: history, converged: true });
    }

    let m = cfg.max_iter;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m.min(64) + 1);
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(m.min(64));
    // Hessenberg columns, each of length j + 2.
    let mut hess: Vec<Vec<f64>> = Vec::with_capacity(m.min(64));
    let mut cs: Vec<f64> = Vec::new();
    let mut sn: Vec<f64> = Vec::new();
    let mut g = vec![beta];
    r.iter_mut().for_each(|v| *v /= beta);
    basis.push(r);

    let mut converged = false;
    let mut j = 0;
    while j < m {
        let mut z = vec![0.0; n];
        pc.apply(&basis[j], &mut z)?;
        cfg.project(&mut z);
        let mut w = vec![0.0; n];
        op.apply(&z, &mut w);
        directions.push(z);

        let wnorm0 = norm2(&w);
        let mut h = vec![0.0; j + 2];
        for _ in 0..2 {
            for (i, v) in basis.iter().enumerate() {
                let c = dot(v, &w);
                h[i] += c;
                axpy(-c, v, &mut w);
            }
        }
        let wnorm = norm2(&w);
        h[j + 1] = wnorm;

        for i in 0..j {
            let (a, bb) = (h[i], h[i + 1]);
            h[i] = cs[i] * a + sn[i] * bb;
            h[i + 1] = -sn[i] * a + cs[i] * bb;
        }
        let denom = h[j].hypot(h[j + 1]);
        let (c, s) = if denom == 0.0 { (1.0, 0.0) } else { (h[j] / denom, h[j + 1] / denom) };
        cs.push(c);
        sn.push(s);
        h[j] = denom;
        h[j + 1] = 0.0;
        let gj = g[j];
        g[j] = c * gj;
        g.push(-s * gj);
        hess.push(h);
        j += 1;

        let res = g[j].abs();
        history.push(res);
        if res <= tol {
            converged = true;
            break;
        }
        // Happy breakdown: the Krylov space is invariant.
        if wnorm <= 1e-14 * wnorm0 || denom == 0.0 {
            break;
        }
        w.iter_mut().for_each(|v| *v /= wnorm);
        basis.push(w);
    }

    // Back substitution on the triangular factor.
    let k = j;
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = g[i];
        for (l, yl) in y.iter().enumerate().skip(i + 1) {
            s -= hess[l][i] * yl;
        }
        y[i] = if hess[i][i] != 0.0 { s / hess[i][i] } else { 0.0 };
    }
    for (yi, z) in y.iter().zip(&directions) {
        axpy(*yi, z, &mut x);
    }
    cfg.project(&mut x);

    Ok(KrylovSolution { x, iterations: k, residual_history: history, converged })
}
