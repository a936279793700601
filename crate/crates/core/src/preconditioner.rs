//! Nested block preconditioner for the augmented Newton system.
//!
//! The outer system is augmented before it is solved: the momentum block
//! becomes `A + gamma_d B^T M_p^{-1} B` and the momentum right-hand side gains
//! `gamma_d B^T M_p^{-1} r_p`. Both changes cancel on the pressure row, so the
//! solution is unchanged.

use serde::{Deserialize, Serialize};

use crate::assembly::{BlockSystem, IterateState, Problem};
use crate::error::{Error, Result};
use crate::linalg::{
    axpy, dot, fgmres, norm2, symmetric_eigenvalues, CsrMatrix, DenseMatrix, KrylovConfig, Preconditioner,
    SparseLu,
};

/// How the augmented momentum block is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MomentumStrategy {
    /// Sparse LU factorization.
    Lu,
    /// FGMRES preconditioned by geometric multigrid.
    Multigrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockPrecondConfig {
    pub gamma_d: f64,
    pub strategy: MomentumStrategy,
    pub inner_atol: f64,
    pub inner_rtol: f64,
}

impl Default for BlockPrecondConfig {
    fn default() -> Self {
        Self { gamma_d: 1e4, strategy: MomentumStrategy::Lu, inner_atol: 1e-8, inner_rtol: 1e-9 }
    }
}

impl BlockPrecondConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_d > 0.0 && self.gamma_d.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma_d must be positive, got {}", self.gamma_d)));
        }
        if !(self.inner_atol > 0.0 && self.inner_rtol > 0.0) {
            return Err(Error::InvalidArgument("inner tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a momentum solver may need to rebuild itself for a new Newton
/// step.
pub struct MomentumContext<'a> {
    pub problem: &'a Problem,
    pub state: &'a IterateState,
    pub mu: f64,
    /// Unaugmented Newton blocks at `state`.
    pub blocks: &'a BlockSystem,
    pub gamma_d: f64,
    /// The assembled augmented momentum block.
    pub matrix: &'a CsrMatrix,
}

/// Approximate inverse of `A_gamma - D C^{-1} D^T`.
pub trait MomentumSolver {
    fn rebuild(&mut self, ctx: &MomentumContext<'_>) -> Result<()>;
    fn solve(&mut self, rhs: &[f64]) -> Result<Vec<f64>>;
    /// Cumulative number of inner Krylov iterations.
    fn iterations(&self) -> usize {
        0
    }
    /// Cumulative number of solves.
    fn solves(&self) -> usize;
}

#[derive(Debug, Default)]
pub struct LuMomentumSolver {
    lu: Option<SparseLu>,
    solves: usize,
}

impl LuMomentumSolver {
    pub fn new() -> Self {
        Self::default()
    }
}

impl MomentumSolver for LuMomentumSolver {
    fn rebuild(&mut self, ctx: &MomentumContext<'_>) -> Result<()> {
        self.lu = Some(SparseLu::factor(ctx.matrix)?);
        Ok(())
    }

    fn solve(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let lu = self.lu.as_ref().ok_or_else(|| Error::InvalidState("momentum solver used before rebuild".into()))?;
        self.solves += 1;
        Ok(lu.solve(rhs))
    }

    fn solves(&self) -> usize {
        self.solves
    }
}

/// `gamma_d B^T M_p^{-1} B` for the given divergence matrix.
pub fn grad_div_term(b: &CsrMatrix, mass_p: &[f64], gamma_d: f64) -> CsrMatrix {
    let scale: Vec<f64> = mass_p.iter().map(|m| gamma_d / m).collect();
    b.transpose().matmul(&CsrMatrix::from_diagonal(&scale).matmul(b))
}

fn inverse_diagonal(c: &[f64]) -> Result<Vec<f64>> {
    c.iter()
        .enumerate()
        .map(|(i, &v)| if v == 0.0 || !v.is_finite() { Err(Error::ZeroDiagonal(i)) } else { Ok(1.0 / v) })
        .collect()
}

/// Copy of `blocks` with the momentum block augmented by the grad-div term.
pub fn augment_blocks(blocks: &BlockSystem, gamma_d: f64) -> BlockSystem {
    let mut out = blocks.clone();
    out.a = blocks.a.add(1.0, &grad_div_term(&blocks.b, &blocks.mass_p, gamma_d));
    out
}

/// Adds `gamma_d B^T M_p^{-1} r_p` to the momentum part of a right-hand side
/// laid out as `(rho, u, p, lambda)`.
pub fn augment_rhs(blocks: &BlockSystem, gamma_d: f64, rhs: &mut [f64]) {
    let (nr, nu, np) = (blocks.n_rho(), blocks.n_u(), blocks.n_p());
    let scaled: Vec<f64> = (0..np).map(|k| gamma_d * rhs[nr + nu + k] / blocks.mass_p[k]).collect();
    let lift = blocks.b.transpose_matvec(&scaled);
    axpy(1.0, &lift, &mut rhs[nr..nr + nu]);
}

/// Residual of the augmented formulation, `f_u + gamma_d B^T M_p^{-1} f_p`
/// with `B` acting on free velocity dofs. It has the same roots as `f`.
pub fn augment_residual(problem: &Problem, gamma_d: f64, f: &mut [f64]) {
    let (nr, nu) = (problem.n_rho(), problem.n_u());
    let areas = &problem.mesh().areas;
    let scaled: Vec<f64> = (0..problem.n_p()).map(|k| gamma_d * f[nr + nu + k] / areas[k]).collect();
    let lift = problem.divergence_free_cols().transpose_matvec(&scaled);
    axpy(1.0, &lift, &mut f[nr..nr + nu]);
}

fn subtract_material_coupling(a: &CsrMatrix, blocks: &BlockSystem) -> Result<CsrMatrix> {
    let inv_c = inverse_diagonal(&blocks.c)?;
    let dcd = blocks.d.scale_columns(&inv_c).matmul(&blocks.d.transpose());
    Ok(a.add(-1.0, &dcd))
}

/// `A + gamma_d B^T M_p^{-1} B - D C^{-1} D^T` for unaugmented `blocks`.
pub fn build_augmented_momentum(blocks: &BlockSystem, gamma_d: f64) -> Result<CsrMatrix> {
    let a = blocks.a.add(1.0, &grad_div_term(&blocks.b, &blocks.mass_p, gamma_d));
    subtract_material_coupling(&a, blocks)
}

/// Removes the mean of `v`.
fn remove_constant(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Block factorization solve with the augmented Stokes-like block
/// `[[Ã, B^T], [B, 0]]`, replacing the pressure Schur complement inverse by
/// `-gamma_d M_p^{-1}`.
pub fn apply_s1_inverse(
    rhs_u: &[f64],
    rhs_p: &[f64],
    gamma_d: f64,
    momentum: &mut dyn MomentumSolver,
    b: &CsrMatrix,
    mass_p: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let as_precond = |e: Error| match e {
        Error::Preconditioner(_) => e,
        other => Error::Preconditioner(format!("momentum solve failed: {other}")),
    };
    let v = momentum.solve(rhs_u).map_err(as_precond)?;
    let bv = b.matvec(&v);
    let mut dp: Vec<f64> = (0..rhs_p.len()).map(|k| -gamma_d * (rhs_p[k] - bv[k]) / mass_p[k]).collect();
    remove_constant(&mut dp);
    let mut w = rhs_u.to_vec();
    axpy(-1.0, &b.transpose_matvec(&dp), &mut w);
    let du = momentum.solve(&w).map_err(as_precond)?;
    Ok((du, dp))
}

/// The nested preconditioner for an augmented [`BlockSystem`].
pub struct BlockPreconditioner<'a> {
    blocks: &'a BlockSystem,
    momentum: &'a mut dyn MomentumSolver,
    gamma_d: f64,
    inv_c: Vec<f64>,
    /// Approximation of `H^{-1} E^T` over `(rho, u, p)`.
    multiplier_response: Vec<f64>,
    s0: f64,
}

impl<'a> BlockPreconditioner<'a> {
    /// `blocks` must already be augmented and `momentum` rebuilt for them.
    /// One extra application of the inner solver yields the scalar Schur
    /// complement of the volume row.
    pub fn new(blocks: &'a BlockSystem, gamma_d: f64, momentum: &'a mut dyn MomentumSolver) -> Result<Self> {
        let inv_c = inverse_diagonal(&blocks.c)?;
        let mut pc = Self { blocks, momentum, gamma_d, inv_c, multiplier_response: Vec::new(), s0: -1.0 };
        let n = blocks.n_rho() + blocks.n_u() + blocks.n_p();
        if blocks.e.iter().all(|&e| e == 0.0) {
            pc.multiplier_response = vec![0.0; n];
            return Ok(pc);
        }
        let mut et = vec![0.0; n];
        et[..blocks.n_rho()].copy_from_slice(&blocks.e);
        let w = pc.apply_inner(&et)?;
        let s0 = -dot(&blocks.e, &w[..blocks.n_rho()]);
        if !(s0.abs() >= 1e-14) {
            return Err(Error::DegenerateMultiplier(s0));
        }
        pc.multiplier_response = w;
        pc.s0 = s0;
        Ok(pc)
    }

    /// Scalar Schur complement `-E H^{-1} E^T`; `-1` when `E` vanishes.
    pub fn s0(&self) -> f64 {
        self.s0
    }

    /// Approximate inverse of the `(rho, u, p)` block.
    pub fn apply_inner(&mut self, r: &[f64]) -> Result<Vec<f64>> {
        let (nr, nu) = (self.blocks.n_rho(), self.blocks.n_u());
        let (r_rho, rest) = r.split_at(nr);
        let (r_u, r_p) = rest.split_at(nu);
        let t: Vec<f64> = r_rho.iter().zip(&self.inv_c).map(|(a, c)| a * c).collect();
        let mut b_u = r_u.to_vec();
        axpy(-1.0, &self.blocks.d.matvec(&t), &mut b_u);
        let (du, dp) =
            apply_s1_inverse(&b_u, r_p, self.gamma_d, &mut *self.momentum, &self.blocks.b, &self.blocks.mass_p)?;
        let dtu = self.blocks.d.transpose_matvec(&du);
        let mut out = Vec::with_capacity(r.len());
        out.extend((0..nr).map(|i| self.inv_c[i] * (r_rho[i] - dtu[i])));
        out.extend(du);
        out.extend(dp);
        Ok(out)
    }
}

impl Preconditioner for BlockPreconditioner<'_> {
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()> {
        let n = r.len() - 1;
        let y = self.apply_inner(&r[..n])?;
        let nr = self.blocks.n_rho();
        let dl = (r[n] - dot(&self.blocks.e, &y[..nr])) / self.s0;
        for i in 0..n {
            z[i] = y[i] - self.multiplier_response[i] * dl;
        }
        z[n] = dl;
        Ok(())
    }
}

/// Unit vector along the constant pressure mode of a system of size `dim`.
pub fn pressure_nullspace(n_rho: usize, n_u: usize, n_p: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_rho + n_u + n_p + 1];
    let s = 1.0 / (n_p as f64).sqrt();
    v[n_rho + n_u..n_rho + n_u + n_p].iter_mut().for_each(|x| *x = s);
    v
}

/// Outcome of one preconditioned Newton solve.
#[derive(Debug, Clone)]
pub struct LinearSolveReport {
    /// Newton step in `(rho, u, p, lambda)` layout.
    pub step: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub momentum_solves: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Solves the Newton system at `state` for the residual `f` with outer FGMRES
/// and the nested block preconditioner. A non-converged outer solve is an
/// error.
#[allow(clippy::too_many_arguments)]
pub fn solve_newton_system(
    problem: &Problem,
    state: &IterateState,
    mu: f64,
    active: &[bool],
    f: &[f64],
    cfg: &BlockPrecondConfig,
    outer: &KrylovConfig,
    momentum: &mut dyn MomentumSolver,
) -> Result<LinearSolveReport> {
    let report = run_newton_krylov(problem, state, mu, active, f, cfg, outer, momentum)?;
    if !report.converged {
        return Err(Error::NonConvergence {
            iterations: report.outer_iterations,
            residual: report.residual_history.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(report)
}

/// Same as [`solve_newton_system`] but reports a non-converged outer solve
/// through [`LinearSolveReport::converged`] instead of failing.
#[allow(clippy::too_many_arguments)]
pub fn run_newton_krylov(
    problem: &Problem,
    state: &IterateState,
    mu: f64,
    active: &[bool],
    f: &[f64],
    cfg: &BlockPrecondConfig,
    outer: &KrylovConfig,
    momentum: &mut dyn MomentumSolver,
) -> Result<LinearSolveReport> {
    cfg.validate()?;
    let blocks = problem.jacobian(state, mu, active)?;
    let mut rhs = blocks.newton_rhs(f);
    let aug = augment_blocks(&blocks, cfg.gamma_d);
    augment_rhs(&blocks, cfg.gamma_d, &mut rhs);
    let matrix = subtract_material_coupling(&aug.a, &aug)?;
    momentum.rebuild(&MomentumContext { problem, state, mu, blocks: &blocks, gamma_d: cfg.gamma_d, matrix: &matrix })?;
    let (it0, solves0) = (momentum.iterations(), momentum.solves());

    let null = pressure_nullspace(aug.n_rho(), aug.n_u(), aug.n_p());
    let kcfg = KrylovConfig::new(outer.atol, outer.rtol, outer.max_iter)?.with_nullspace(vec![null])?;
    let sol = {
        let mut pc = BlockPreconditioner::new(&aug, cfg.gamma_d, momentum)?;
        fgmres(&aug, &rhs, &mut pc, None, &kcfg)?
    };
    log::debug!("outer FGMRES: {} iterations, residual {:.3e}", sol.iterations, sol.final_residual());
    Ok(LinearSolveReport {
        converged: sol.converged,
        outer_iterations: sol.iterations,
        inner_iterations: momentum.iterations() - it0,
        momentum_solves: momentum.solves() - solves0,
        step: blocks.step_from_solution(sol.x),
        residual_history: sol.residual_history,
    })
}

/// Eigenvalues of `gamma_d M_p^{-1} S_2` with
/// `S_2 = -B (A_gamma - D C^{-1} D^T)^{-1} B^T`, formed densely for the
/// unaugmented `blocks`. The constant pressure mode is removed first. For
/// `gamma_d = 0` the unscaled `M_p^{-1} S_2` of the plain system is used.
pub fn schur_eigen_diagnostic(blocks: &BlockSystem, gamma_d: f64) -> Result<Vec<f64>> {
    let scale = if gamma_d == 0.0 { 1.0 } else { gamma_d };
    let mom = build_augmented_momentum(blocks, gamma_d)?;
    let lu = SparseLu::factor(&mom)?;
    let np = blocks.n_p();
    let bt = blocks.b.transpose();
    // Columns of A^{-1} B^T, then S2 = -B (A^{-1} B^T).
    let mut s2 = DenseMatrix::zeros(np, np);
    for k in 0..np {
        let mut ek = vec![0.0; np];
        ek[k] = 1.0;
        let col = lu.solve(&bt.matvec(&ek));
        let bcol = blocks.b.matvec(&col);
        for i in 0..np {
            s2[(i, k)] = -bcol[i];
        }
    }
    // Symmetric form gamma M^{-1/2} S2 M^{-1/2}.
    let sq: Vec<f64> = blocks.mass_p.iter().map(|m| m.sqrt()).collect();
    let t = DenseMatrix::from_fn(np, np, |i, j| scale * 0.5 * (s2[(i, j)] + s2[(j, i)]) / (sq[i] * sq[j]));
    // The constant mode maps to M^{1/2} 1; reflect it onto e_0 and drop it.
    let mut v = sq.clone();
    let nv = norm2(&v);
    v[0] += nv;
    let vv = dot(&v, &v);
    let reflect = DenseMatrix::from_fn(np, np, |i, j| if i == j { 1.0 } else { 0.0 } - 2.0 * v[i] * v[j] / vv);
    let rt = reflect.matmul(&t).matmul(&reflect);
    let reduced = DenseMatrix::from_fn(np - 1, np - 1, |i, j| rt[(i + 1, j + 1)]);
    Ok(symmetric_eigenvalues(&reduced))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::ProblemConfig;
    use crate::linalg::{dense_solve, DenseLu, IdentityPreconditioner, LinearOperator};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(nx: usize, ny: usize) -> Problem {
        Problem::double_pipe(nx, ny, ProblemConfig::default()).unwrap()
    }

    fn all_inactive(p: &Problem) -> Vec<bool> {
        vec![false; p.n_rho()]
    }

    /// Interior state with a nonzero, divergence-free velocity.
    fn stokes_state(p: &Problem) -> IterateState {
        p.initial_state().unwrap()
    }

    fn lu_for(p: &Problem, state: &IterateState, mu: f64, blocks: &BlockSystem, gamma: f64) -> LuMomentumSolver {
        let matrix = build_augmented_momentum(blocks, gamma).unwrap();
        let mut m = LuMomentumSolver::new();
        m.rebuild(&MomentumContext { problem: p, state, mu, blocks, gamma_d: gamma, matrix: &matrix }).unwrap();
        m
    }

    fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        norm2(&d) / norm2(b).max(1e-300)
    }

    #[test]
    fn zero_coupling_leaves_grad_div_only() {
        let p = small_problem(2, 2);
        let state = IterateState { u: vec![0.0; p.n_u()], ..stokes_state(&p) };
        let blocks = p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap();
        assert_eq!(blocks.d.prune().nnz(), 0);
        let gamma = 3.0;
        let got = build_augmented_momentum(&blocks, gamma).unwrap();
        let mut kdiv = p.assemble_div_div(gamma);
        kdiv.zero_rows(&blocks.constrained);
        kdiv.zero_cols(&blocks.constrained);
        let want = blocks.a.add(1.0, &kdiv);
        assert!(got.add(-1.0, &want).max_abs() <= 1e-12 * want.max_abs());
    }

    #[test]
    fn all_active_without_augmentation_is_momentum() {
        let p = small_problem(2, 2);
        let state = stokes_state(&p);
        let active = vec![true; p.n_rho()];
        let blocks = p.jacobian(&state, 1.0, &active).unwrap();
        assert!(blocks.c.iter().all(|&c| c == 1.0));
        let got = build_augmented_momentum(&blocks, 0.0).unwrap();
        assert!(got.add(-1.0, &blocks.a).max_abs() <= 1e-14 * blocks.a.max_abs());
    }

    #[test]
    fn zero_c_diagonal_is_reported() {
        let p = small_problem(1, 1);
        let state = IterateState { u: vec![0.0; p.n_u()], ..stokes_state(&p) };
        let blocks = p.jacobian(&state, 0.0, &all_inactive(&p)).unwrap();
        assert!(matches!(build_augmented_momentum(&blocks, 1.0), Err(Error::ZeroDiagonal(_))));
    }

    #[test]
    fn s1_inverse_of_zero_is_zero() {
        let p = small_problem(2, 2);
        let state = stokes_state(&p);
        let blocks = augment_blocks(&p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap(), 1e4);
        let mut m = lu_for(&p, &state, 1.0, &p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap(), 1e4);
        let (du, dp) =
            apply_s1_inverse(&vec![0.0; p.n_u()], &vec![0.0; p.n_p()], 1e4, &mut m, &blocks.b, &blocks.mass_p)
                .unwrap();
        assert!(du.iter().chain(&dp).all(|&v| v == 0.0));
        assert_eq!(m.solves(), 2);
    }

    /// Dense `[[Ã, B^T], [B, 0]]` bordered with the zero-mean pressure row.
    fn dense_s1(mom: &CsrMatrix, b: &CsrMatrix) -> DenseMatrix {
        let (nu, np) = (mom.nrows(), b.nrows());
        let n = nu + np + 1;
        let mut s = DenseMatrix::zeros(n, n);
        for (i, j, v) in mom.triplets() {
            s[(i, j)] = v;
        }
        for (i, j, v) in b.triplets() {
            s[(nu + i, j)] = v;
            s[(j, nu + i)] = v;
        }
        for k in 0..np {
            s[(nu + np, nu + k)] = 1.0;
            s[(nu + k, nu + np)] = 1.0;
        }
        s
    }

    #[test]
    fn s1_inverse_matches_dense_inverse_at_large_gamma() {
        let p = small_problem(2, 2);
        let state = stokes_state(&p);
        let gamma = 1e5;
        let raw = p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap();
        let blocks = augment_blocks(&raw, gamma);
        let mom = build_augmented_momentum(&raw, gamma).unwrap();
        let mut m = lu_for(&p, &state, 1.0, &raw, gamma);
        let s = dense_s1(&mom, &blocks.b);
        let (nu, np) = (p.n_u(), p.n_p());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut rhs: Vec<f64> = (0..nu + np).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (i, &c) in blocks.constrained.iter().enumerate() {
            if c {
                rhs[i] = 0.0;
            }
        }
        remove_constant(&mut rhs[nu..]);
        let mut full = rhs.clone();
        full.push(0.0);
        let exact = dense_solve(&s, &full).unwrap();
        let (du, dp) = apply_s1_inverse(&rhs[..nu], &rhs[nu..], gamma, &mut m, &blocks.b, &blocks.mass_p).unwrap();
        let got: Vec<f64> = du.into_iter().chain(dp).collect();
        assert!(rel_diff(&got, &exact[..nu + np]) <= 1e-2, "error {}", rel_diff(&got, &exact[..nu + np]));
    }

    #[test]
    fn outer_fgmres_on_s1_is_fast_at_large_gamma() {
        let p = small_problem(2, 2);
        let state = stokes_state(&p);
        let gamma = 1e5;
        let raw = p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap();
        let blocks = augment_blocks(&raw, gamma);
        let mom = build_augmented_momentum(&raw, gamma).unwrap();
        let mut m = lu_for(&p, &state, 1.0, &raw, gamma);
        let (nu, np) = (p.n_u(), p.n_p());
        let (b, mom_ref) = (&blocks.b, &mom);
        let op = crate::linalg::FnOperator::new(nu + np, move |x: &[f64], y: &mut [f64]| {
            let (xu, xp) = x.split_at(nu);
            let mut yu = mom_ref.matvec(xu);
            axpy(1.0, &b.transpose_matvec(xp), &mut yu);
            y[..nu].copy_from_slice(&yu);
            y[nu..].copy_from_slice(&b.matvec(xu));
        });
        let mut null = vec![0.0; nu + np];
        null[nu..].iter_mut().for_each(|v| *v = 1.0);
        let cfg = KrylovConfig::new(1e-10, 1e-10, 50).unwrap().with_nullspace(vec![null]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rhs: Vec<f64> = (0..nu + np).map(|_| rng.random_range(-1.0..1.0)).collect();
        remove_constant(&mut rhs[nu..]);
        let mass = blocks.mass_p.clone();
        let mut pc = crate::linalg::FnPreconditioner(|r: &[f64], z: &mut [f64]| {
            let (du, dp) = apply_s1_inverse(&r[..nu], &r[nu..], gamma, &mut m, b, &mass)?;
            z[..nu].copy_from_slice(&du);
            z[nu..].copy_from_slice(&dp);
            Ok(())
        });
        let sol = fgmres(&op, &rhs, &mut pc, None, &cfg).unwrap();
        assert!(sol.converged);
        assert!(sol.iterations <= 5, "{} iterations", sol.iterations);
    }

    #[test]
    fn vanishing_volume_row_uses_sentinel() {
        let p = small_problem(2, 2);
        let state = stokes_state(&p);
        let active = vec![true; p.n_rho()];
        let raw = p.jacobian(&state, 1.0, &active).unwrap();
        let blocks = augment_blocks(&raw, 1e4);
        let mut m = lu_for(&p, &state, 1.0, &raw, 1e4);
        let mut pc = BlockPreconditioner::new(&blocks, 1e4, &mut m).unwrap();
        assert_eq!(pc.s0(), -1.0);
        let n = blocks.dim();
        let mut r = vec![0.0; n];
        r[n - 1] = 0.7;
        r[3] = 1.5;
        let mut z = vec![0.0; n];
        pc.apply(&r, &mut z).unwrap();
        assert_eq!(z[n - 1], -0.7);
        let inner = pc.apply_inner(&r[..n - 1]).unwrap();
        assert_eq!(&z[..n - 1], &inner[..]);
    }

    #[test]
    fn scalar_schur_complement_is_negative() {
        let p = small_problem(3, 2);
        let state = stokes_state(&p);
        let raw = p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap();
        // Dense oracle: -E H^{-1} E^T from the full (rho, u, p) block with a
        // bordering row pinning the pressure mean.
        let (nr, nu, np) = (raw.n_rho(), raw.n_u(), raw.n_p());
        let n = nr + nu + np;
        let mut h = DenseMatrix::zeros(n + 1, n + 1);
        for i in 0..nr {
            h[(i, i)] = raw.c[i];
        }
        for (i, j, v) in raw.d.triplets() {
            h[(nr + i, j)] = v;
            h[(j, nr + i)] = v;
        }
        for (i, j, v) in raw.a.triplets() {
            h[(nr + i, nr + j)] = v;
        }
        for (i, j, v) in raw.b.triplets() {
            h[(nr + nu + i, nr + j)] = v;
            h[(nr + j, nr + nu + i)] = v;
        }
        for k in 0..np {
            h[(n, nr + nu + k)] = 1.0;
            h[(nr + nu + k, n)] = 1.0;
        }
        let mut et = vec![0.0; n + 1];
        et[..nr].copy_from_slice(&raw.e);
        let w = DenseLu::factor(&h).unwrap().solve(&et);
        let s0_dense = -dot(&raw.e, &w[..nr]);
        assert!(s0_dense < 0.0);

        let gamma = 1e4;
        let blocks = augment_blocks(&raw, gamma);
        let mut m = lu_for(&p, &state, 1.0, &raw, gamma);
        let pc = BlockPreconditioner::new(&blocks, gamma, &mut m).unwrap();
        assert!(pc.s0() < 0.0);
        assert!((pc.s0() - s0_dense).abs() <= 1e-2 * s0_dense.abs());
    }

    fn newton_step(p: &Problem, state: &IterateState, gamma: f64) -> LinearSolveReport {
        let mu = 1.0;
        let active = all_inactive(p);
        let f = p.residual(state, mu).unwrap().to_vec();
        let cfg = BlockPrecondConfig { gamma_d: gamma, ..Default::default() };
        let outer = KrylovConfig::new(1e-13, 1e-12, 200).unwrap();
        let mut m = LuMomentumSolver::new();
        solve_newton_system(p, state, mu, &active, &f, &cfg, &outer, &mut m).unwrap()
    }

    #[test]
    fn augmentation_does_not_change_the_newton_step() {
        let p = small_problem(3, 2);
        let mut state = stokes_state(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        state.rho.iter_mut().for_each(|r| *r = rng.random_range(0.2..0.8));
        state.lambda = 0.3;
        let small = newton_step(&p, &state, 1.0);
        let large = newton_step(&p, &state, 1e3);
        let np = p.n_p();
        let strip = |s: &[f64]| {
            let mut v = s.to_vec();
            let off = p.n_rho() + p.n_u();
            remove_constant(&mut v[off..off + np]);
            v
        };
        let d = rel_diff(&strip(&large.step), &strip(&small.step));
        assert!(d <= 1e-6, "relative difference {d}");
    }

    #[test]
    fn preconditioner_reduces_the_residual_tenfold_in_one_step() {
        let p = small_problem(2, 2);
        let mut state = stokes_state(&p);
        state.rho.iter_mut().enumerate().for_each(|(i, r)| *r = 0.3 + 0.04 * i as f64);
        let mu = 1.0;
        let gamma = 1e4;
        let active = all_inactive(&p);
        let raw = p.jacobian(&state, mu, &active).unwrap();
        let blocks = augment_blocks(&raw, gamma);
        let mut rhs = raw.newton_rhs(&p.residual(&state, mu).unwrap().to_vec());
        augment_rhs(&raw, gamma, &mut rhs);
        let null = pressure_nullspace(raw.n_rho(), raw.n_u(), raw.n_p());
        KrylovConfig::default().with_nullspace(vec![null.clone()]).unwrap().project(&mut rhs);
        let mut m = lu_for(&p, &state, mu, &raw, gamma);
        let mut pc = BlockPreconditioner::new(&blocks, gamma, &mut m).unwrap();
        let mut z = vec![0.0; rhs.len()];
        pc.apply(&rhs, &mut z).unwrap();
        let mut az = vec![0.0; rhs.len()];
        blocks.apply(&z, &mut az);
        let mut res: Vec<f64> = rhs.iter().zip(&az).map(|(a, b)| a - b).collect();
        KrylovConfig::default().with_nullspace(vec![null]).unwrap().project(&mut res);
        assert!(norm2(&res) <= 0.1 * norm2(&rhs), "ratio {}", norm2(&res) / norm2(&rhs));
    }

    #[test]
    fn unpreconditioned_solve_agrees_with_block_preconditioned() {
        let p = small_problem(2, 1);
        let state = stokes_state(&p);
        let mu = 1.0;
        let active = all_inactive(&p);
        let f = p.residual(&state, mu).unwrap().to_vec();
        let raw = p.jacobian(&state, mu, &active).unwrap();
        let rhs = raw.newton_rhs(&f);
        let null = pressure_nullspace(raw.n_rho(), raw.n_u(), raw.n_p());
        let cfg = KrylovConfig::new(1e-14, 1e-13, 2000).unwrap().with_nullspace(vec![null]).unwrap();
        let plain = fgmres(&raw, &rhs, &mut IdentityPreconditioner, None, &cfg).unwrap();
        assert!(plain.converged);
        let pre = newton_step(&p, &state, 1e4);
        let want = raw.step_from_solution(plain.x);
        assert!(rel_diff(&pre.step, &want) <= 1e-6);
    }

    #[test]
    fn schur_eigenvalues_approach_minus_one() {
        let p = small_problem(2, 2);
        let n_rho = p.n_rho();
        let state = IterateState { rho: vec![1.0; n_rho], u: vec![0.0; p.n_u()], p: vec![0.0; p.n_p()], lambda: 0.0 };
        let blocks = p.jacobian(&state, 1.0, &all_inactive(&p)).unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [1e2, 1e3, 1e4, 1e5] {
            let eig = schur_eigen_diagnostic(&blocks, gamma).unwrap();
            assert_eq!(eig.len(), p.n_p() - 1);
            assert!(eig.iter().all(|&l| l > -1.0 && l < 0.0), "{eig:?}");
            let dev = eig.iter().map(|l| (l + 1.0).abs()).fold(0.0, f64::max);
            assert!(dev < prev);
            prev = dev;
        }
        assert!(prev <= 1e-2, "deviation {prev}");
    }

    #[test]
    fn augmented_momentum_is_symmetric() {
        let p = small_problem(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let mut state = stokes_state(&p);
            state.rho.iter_mut().for_each(|r| *r = rng.random_range(0.05..0.95));
            state.u.iter_mut().for_each(|u| *u += rng.random_range(-0.5..0.5));
            let active: Vec<bool> = (0..p.n_rho()).map(|_| rng.random_bool(0.3)).collect();
            let blocks = p.jacobian(&state, 0.5, &active).unwrap();
            let m = build_augmented_momentum(&blocks, 1e4).unwrap();
            assert!(m.asymmetry() <= 1e-13 * m.max_abs());
        }
    }
}
