//! Matrices and residuals of the discrete optimality system.
//!
//! The unknown is `z = (rho, u, p, lambda)` flattened in that order. The
//! Newton matrix keeps the volume row as `E = -|K|`, which is the negative of
//! the derivative of the volume residual; see [`BlockSystem`] for how the
//! multiplier update is signed.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem_spaces::{
    cell_quadrature, facet_point, facet_quadrature, interpolate_boundary, map_point, BasisFunction, BoundaryData,
    Dg0Space, VelocityField, VelocitySpace, BOUNDARY_PIECES,
};
use crate::linalg::{CsrMatrix, LinearOperator, SparseLu};
use crate::mesh::{Mesh, Point};

/// Scalar parameters of the barrier subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub viscosity: f64,
    pub alpha_max: f64,
    pub q: f64,
    pub volume_fraction: f64,
    pub penalty: f64,
    pub eps_log: f64,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self { viscosity: 1.0, alpha_max: 2.5e4, q: 0.1, volume_fraction: 1.0 / 3.0, penalty: 10.0, eps_log: 1e-4 }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.viscosity > 0.0
            && self.alpha_max > 0.0
            && self.q > 0.0
            && self.volume_fraction > 0.0
            && self.volume_fraction < 1.0
            && self.penalty > 0.0
            && self.eps_log > 0.0
            && self.eps_log < 0.5;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid problem parameters: {self:?}")))
        }
    }

    /// Inverse permeability.
    pub fn alpha(&self, rho: f64) -> f64 {
        self.alpha_max * (1.0 - rho * (self.q + 1.0) / (rho + self.q))
    }

    pub fn alpha_prime(&self, rho: f64) -> f64 {
        -self.alpha_max * self.q * (self.q + 1.0) / (rho + self.q).powi(2)
    }

    pub fn alpha_second(&self, rho: f64) -> f64 {
        2.0 * self.alpha_max * self.q * (self.q + 1.0) / (rho + self.q).powi(3)
    }
}

/// Inlet/outlet profile of the double-pipe benchmark on `(0, 1.5) x (0, 1)`.
pub fn double_pipe_velocity(x: Point) -> [f64; 2] {
    let on_side = x[0].abs() < 1e-12 || (x[0] - 1.5).abs() < 1e-12;
    if !on_side {
        return [0.0, 0.0];
    }
    for c in [0.75, 0.25] {
        if (x[1] - c).abs() <= 1.0 / 12.0 {
            return [1.0 - 144.0 * (x[1] - c).powi(2), 0.0];
        }
    }
    [0.0, 0.0]
}

/// Coefficients of `(rho, u, p, lambda)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: f64,
}

impl IterateState {
    pub fn len(&self) -> usize {
        self.rho.len() + self.u.len() + self.p.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.len());
        z.extend_from_slice(&self.rho);
        z.extend_from_slice(&self.u);
        z.extend_from_slice(&self.p);
        z.push(self.lambda);
        z
    }

    pub fn from_slice(z: &[f64], n_rho: usize, n_u: usize, n_p: usize) -> Self {
        assert_eq!(z.len(), n_rho + n_u + n_p + 1);
        Self {
            rho: z[..n_rho].to_vec(),
            u: z[n_rho..n_rho + n_u].to_vec(),
            p: z[n_rho + n_u..n_rho + n_u + n_p].to_vec(),
            lambda: z[n_rho + n_u + n_p],
        }
    }
}

/// Residual blocks before any active-set modification.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub lambda: f64,
}

impl Residual {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(self.rho.len() + self.u.len() + self.p.len() + 1);
        f.extend_from_slice(&self.rho);
        f.extend_from_slice(&self.u);
        f.extend_from_slice(&self.p);
        f.push(self.lambda);
        f
    }
}

/// Block Newton matrix
///
/// ```text
/// [ C   D^T  0    E^T ]
/// [ D   A    B^T  0   ]
/// [ 0   B    0    0   ]
/// [ E   0    0    0   ]
/// ```
///
/// with `E = -|K|`. The true Jacobian is `S H S` with `S = diag(I, I, I, -1)`,
/// so callers solve `H y = -S f` and recover the step as `S y`.
/// Active material dofs have identity rows in `C` and zero columns in `D`
/// and `E`; velocity dofs fixed by boundary conditions have identity rows and
/// columns in `A`, zero rows in `D` and zero columns in `B`.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    pub a: CsrMatrix,
    pub b: CsrMatrix,
    pub c: Vec<f64>,
    pub d: CsrMatrix,
    pub e: Vec<f64>,
    /// Pressure mass matrix diagonal (cell areas).
    pub mass_p: Vec<f64>,
    pub active: Vec<bool>,
    pub constrained: Vec<bool>,
}

impl BlockSystem {
    pub fn n_rho(&self) -> usize {
        self.c.len()
    }

    pub fn n_u(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_p(&self) -> usize {
        self.mass_p.len()
    }

    pub fn dim(&self) -> usize {
        self.n_rho() + self.n_u() + self.n_p() + 1
    }

    /// Right-hand side `-S f` for the residual `f` with active `rho` rows and
    /// constrained velocity rows handled as in the matrix.
    pub fn newton_rhs(&self, f: &[f64]) -> Vec<f64> {
        let mut rhs: Vec<f64> = f.iter().map(|v| -v).collect();
        for (i, &act) in self.active.iter().enumerate() {
            if act {
                rhs[i] = 0.0;
            }
        }
        let last = rhs.len() - 1;
        rhs[last] = -rhs[last];
        rhs
    }

    /// Maps a solution of `H y = -S f` to the Newton step `S y`.
    pub fn step_from_solution(&self, mut y: Vec<f64>) -> Vec<f64> {
        let last = y.len() - 1;
        y[last] = -y[last];
        y
    }
}

impl LinearOperator for BlockSystem {
    fn nrows(&self) -> usize {
        self.dim()
    }

    fn ncols(&self) -> usize {
        self.dim()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let (nr, nu, np) = (self.n_rho(), self.n_u(), self.n_p());
        let (xr, rest) = x.split_at(nr);
        let (xu, rest) = rest.split_at(nu);
        let (xp, xl) = rest.split_at(np);
        let xl = xl[0];
        let (yr, rest) = y.split_at_mut(nr);
        let (yu, rest) = rest.split_at_mut(nu);
        let (yp, yl) = rest.split_at_mut(np);

        let dtu = self.d.transpose_matvec(xu);
        for i in 0..nr {
            yr[i] = self.c[i] * xr[i] + dtu[i] + self.e[i] * xl;
        }
        self.a.matvec_into(xu, yu);
        let dr = self.d.matvec(xr);
        let btp = self.b.transpose_matvec(xp);
        for i in 0..nu {
            yu[i] += dr[i] + btp[i];
        }
        self.b.matvec_into(xu, yp);
        yl[0] = crate::linalg::dot(&self.e, xr);
    }
}

/// A discretized barrier subproblem on one mesh.
#[derive(Clone)]
pub struct Problem {
    config: ProblemConfig,
    mesh: Arc<Mesh>,
    velocity: VelocitySpace,
    scalar: Dg0Space,
    boundary: BoundaryData,
    force: Option<VelocityField>,
    /// Viscous cell terms plus every facet term of the broken form.
    static_momentum: CsrMatrix,
    /// Local velocity mass matrices, row-major 6x6 per cell.
    local_mass: Vec<[f64; 36]>,
    divergence: CsrMatrix,
    divergence_free_cols: CsrMatrix,
    load: Vec<f64>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("config", &self.config)
            .field("n_rho", &self.n_rho())
            .field("n_u", &self.n_u())
            .finish()
    }
}

impl Problem {
    pub fn new(mesh: Arc<Mesh>, config: ProblemConfig, g: VelocityField, force: Option<VelocityField>) -> Result<Self> {
        config.validate()?;
        let velocity = VelocitySpace::new(mesh.clone());
        let scalar = Dg0Space::new(mesh.clone());
        let boundary = interpolate_boundary(g, &velocity);
        let local_mass = (0..mesh.num_cells()).map(|c| cell_mass(&velocity, c)).collect();
        let static_momentum = assemble_static_momentum(&velocity, &config);
        let divergence = assemble_divergence(&velocity);
        let mut divergence_free_cols = divergence.clone();
        divergence_free_cols.zero_cols(&boundary.constrained);
        let mut problem = Self {
            config,
            mesh,
            velocity,
            scalar,
            boundary,
            force,
            static_momentum,
            local_mass,
            divergence,
            divergence_free_cols,
            load: Vec::new(),
        };
        problem.load = problem.assemble_load();
        Ok(problem)
    }

    /// The double-pipe benchmark on an `nx x ny` grid of `(0, 1.5) x (0, 1)`.
    pub fn double_pipe(nx: usize, ny: usize, config: ProblemConfig) -> Result<Self> {
        let mesh = crate::mesh::build_rect_mesh(1.5, 1.0, nx, ny)?;
        Self::new(Arc::new(mesh), config, Arc::new(double_pipe_velocity), None)
    }

    /// Same boundary data and force on another mesh.
    pub fn on_mesh(&self, mesh: Arc<Mesh>) -> Result<Self> {
        Self::new(mesh, self.config, self.boundary.g.clone(), self.force.clone())
    }

    pub fn with_config(&self, config: ProblemConfig) -> Result<Self> {
        Self::new(self.mesh.clone(), config, self.boundary.g.clone(), self.force.clone())
    }

    pub fn config(&self) -> &ProblemConfig {
        &self.config
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn velocity_space(&self) -> &VelocitySpace {
        &self.velocity
    }

    pub fn scalar_space(&self) -> &Dg0Space {
        &self.scalar
    }

    pub fn boundary(&self) -> &BoundaryData {
        &self.boundary
    }

    pub fn n_rho(&self) -> usize {
        self.scalar.dim()
    }

    pub fn n_u(&self) -> usize {
        self.velocity.dim()
    }

    pub fn n_p(&self) -> usize {
        self.scalar.dim()
    }

    pub fn dim(&self) -> usize {
        self.n_rho() + self.n_u() + self.n_p() + 1
    }

    pub fn cell_local_mass(&self, cell: usize) -> &[f64; 36] {
        &self.local_mass[cell]
    }

    /// Full momentum matrix `a_h(phi_j, phi_i; rho)` without boundary rows
    /// removed.
    pub fn assemble_momentum(&self, rho: &[f64]) -> CsrMatrix {
        assert_eq!(rho.len(), self.n_rho());
        let mut t = Vec::with_capacity(36 * self.mesh.num_cells());
        for (c, m) in self.local_mass.iter().enumerate() {
            let alpha = self.config.alpha(rho[c]);
            let dofs = self.velocity.cell_dofs(c);
            for i in 0..6 {
                for j in 0..6 {
                    t.push((dofs[i], dofs[j], alpha * m[6 * i + j]));
                }
            }
        }
        let brinkman = CsrMatrix::from_triplets(self.n_u(), self.n_u(), &t);
        self.static_momentum.add(1.0, &brinkman)
    }

    /// Momentum matrix with identity rows and columns on boundary dofs.
    pub fn constrained_momentum(&self, rho: &[f64]) -> CsrMatrix {
        let mut a = self.assemble_momentum(rho);
        a.apply_identity_rows_cols(&self.boundary.constrained);
        a
    }

    /// `B_ij = -int psi_i div phi_j`, including boundary columns.
    pub fn divergence(&self) -> &CsrMatrix {
        &self.divergence
    }

    /// `B` with the columns of boundary-constrained dofs zeroed.
    pub fn divergence_free_cols(&self) -> &CsrMatrix {
        &self.divergence_free_cols
    }

    /// Right-hand side `l_h(phi_i)`.
    pub fn load(&self) -> &[f64] {
        &self.load
    }

    fn assemble_load(&self) -> Vec<f64> {
        let mut load = vec![0.0; self.n_u()];
        let nu = self.config.viscosity;
        if let Some(force) = &self.force {
            let quad = cell_quadrature(6).expect("supported degree");
            for c in 0..self.mesh.num_cells() {
                let dofs = self.velocity.cell_dofs(c);
                let basis = self.velocity.cell_basis(c);
                let xc = self.velocity.centroid(c);
                for (b, w) in &quad {
                    let x = map_point(&self.mesh, c, *b);
                    let f = force(x);
                    let jw = 2.0 * self.mesh.areas[c] * w;
                    for (phi, &dof) in basis.iter().zip(&dofs) {
                        let v = phi.eval(xc, x);
                        load[dof] += jw * (f[0] * v[0] + f[1] * v[1]);
                    }
                }
            }
        }
        let g = &self.boundary.g;
        for (e, facet) in self.mesh.facets.iter().enumerate() {
            if !facet.is_boundary() {
                continue;
            }
            let c = facet.cells.0;
            let n = facet.normal;
            let dofs = self.velocity.cell_dofs(c);
            let basis = self.velocity.cell_basis(c);
            let xc = self.velocity.centroid(c);
            let pen = nu * self.config.penalty / facet.length;
            let h = 1.0 / BOUNDARY_PIECES as f64;
            for k in 0..BOUNDARY_PIECES {
                for (t, w) in facet_quadrature() {
                    let x = facet_point(&self.mesh, e, (k as f64 + t) * h);
                    let gv = g(x);
                    let ds = w * h * facet.length;
                    for (phi, &dof) in basis.iter().zip(&dofs) {
                        let v = phi.eval(xc, x);
                        let gn = grad_times(phi, n);
                        load[dof] += ds * (pen * (gv[0] * v[0] + gv[1] * v[1]) - nu * (gn[0] * gv[0] + gn[1] * gv[1]));
                    }
                }
            }
        }
        load
    }

    /// Feasibility check shared by the nonlinear assembly routines.
    fn check_state(&self, state: &IterateState) -> Result<()> {
        if state.rho.len() != self.n_rho() || state.u.len() != self.n_u() || state.p.len() != self.n_p() {
            return Err(Error::InvalidArgument("state dimensions do not match the discretization".into()));
        }
        if let Some((i, r)) = state.rho.iter().enumerate().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return Err(Error::InvalidState(format!("material value {r} at cell {i} leaves [0, 1]")));
        }
        Ok(())
    }

    /// `int_K |u|^2` on each cell.
    pub fn cell_speed_squared(&self, u: &[f64]) -> Vec<f64> {
        (0..self.mesh.num_cells())
            .map(|c| {
                let dofs = self.velocity.cell_dofs(c);
                let m = &self.local_mass[c];
                let mut s = 0.0;
                for i in 0..6 {
                    for j in 0..6 {
                        s += u[dofs[i]] * m[6 * i + j] * u[dofs[j]];
                    }
                }
                s
            })
            .collect()
    }

    /// Nonlinear residual at barrier parameter `mu`. Rows of velocity dofs
    /// fixed by boundary data hold `u_i - g_i`.
    pub fn residual(&self, state: &IterateState, mu: f64) -> Result<Residual> {
        self.check_state(state)?;
        let cfg = &self.config;
        let eps = cfg.eps_log;
        let speed2 = self.cell_speed_squared(&state.u);
        let areas = &self.mesh.areas;
        let f_rho = (0..self.n_rho())
            .map(|c| {
                let r = state.rho[c];
                0.5 * cfg.alpha_prime(r) * speed2[c]
                    + areas[c] * (-mu / (r + eps) + mu / (1.0 + eps - r) + state.lambda)
            })
            .collect();

        let a = self.assemble_momentum(&state.rho);
        let mut f_u = a.matvec(&state.u);
        let btp = self.divergence.transpose_matvec(&state.p);
        for i in 0..self.n_u() {
            f_u[i] += btp[i] - self.load[i];
            if self.boundary.constrained[i] {
                f_u[i] = state.u[i] - self.boundary.values[i];
            }
        }
        let f_p = self.divergence.matvec(&state.u);
        let vol: f64 = areas.iter().zip(&state.rho).map(|(a, r)| a * r).sum();
        let f_lambda = -(cfg.volume_fraction * self.mesh.total_area() - vol);
        Ok(Residual { rho: f_rho, u: f_u, p: f_p, lambda: f_lambda })
    }

    /// Diagonal of `C_mu`; active entries are one.
    pub fn assemble_c_mu(&self, state: &IterateState, mu: f64, active: &[bool]) -> Vec<f64> {
        let cfg = &self.config;
        let eps = cfg.eps_log;
        let speed2 = self.cell_speed_squared(&state.u);
        (0..self.n_rho())
            .map(|c| {
                if active[c] {
                    return 1.0;
                }
                let r = state.rho[c];
                0.5 * cfg.alpha_second(r) * speed2[c]
                    + self.mesh.areas[c] * (mu / (r + eps).powi(2) + mu / (1.0 + eps - r).powi(2))
            })
            .collect()
    }

    /// Coupling blocks `D` (velocity x material) and the volume row `E`.
    /// Columns of active cells vanish; rows of constrained velocity dofs
    /// vanish in `D`.
    pub fn assemble_d_e(&self, state: &IterateState, active: &[bool]) -> (CsrMatrix, Vec<f64>) {
        let mut t = Vec::with_capacity(6 * self.n_rho());
        let mut e = vec![0.0; self.n_rho()];
        for c in 0..self.n_rho() {
            if active[c] {
                continue;
            }
            e[c] = -self.mesh.areas[c];
            let ap = self.config.alpha_prime(state.rho[c]);
            let dofs = self.velocity.cell_dofs(c);
            let m = &self.local_mass[c];
            for i in 0..6 {
                if self.boundary.constrained[dofs[i]] {
                    continue;
                }
                let mu: f64 = (0..6).map(|j| m[6 * i + j] * state.u[dofs[j]]).sum();
                t.push((dofs[i], c, ap * mu));
            }
        }
        (CsrMatrix::from_triplets(self.n_u(), self.n_rho(), &t), e)
    }

    /// Newton matrix at `state` for the given active set.
    pub fn jacobian(&self, state: &IterateState, mu: f64, active: &[bool]) -> Result<BlockSystem> {
        self.check_state(state)?;
        if active.len() != self.n_rho() {
            return Err(Error::InvalidArgument("active set has the wrong length".into()));
        }
        let (d, e) = self.assemble_d_e(state, active);
        Ok(BlockSystem {
            a: self.constrained_momentum(&state.rho),
            b: self.divergence_free_cols.clone(),
            c: self.assemble_c_mu(state, mu, active),
            d,
            e,
            mass_p: self.mesh.areas.clone(),
            active: active.to_vec(),
            constrained: self.boundary.constrained.clone(),
        })
    }

    /// `gamma_d int div phi_i div phi_j` over all dofs.
    pub fn assemble_div_div(&self, gamma_d: f64) -> CsrMatrix {
        let mut t = Vec::with_capacity(36 * self.mesh.num_cells());
        for c in 0..self.mesh.num_cells() {
            let dofs = self.velocity.cell_dofs(c);
            let div: Vec<f64> = self.velocity.cell_basis(c).iter().map(BasisFunction::divergence).collect();
            let area = self.mesh.areas[c];
            for i in 0..6 {
                for j in 0..6 {
                    t.push((dofs[i], dofs[j], gamma_d * area * div[i] * div[j]));
                }
            }
        }
        CsrMatrix::from_triplets(self.n_u(), self.n_u(), &t)
    }

    /// Feasible starting point: `rho = gamma`, the Stokes-Brinkman flow for
    /// that material, and `lambda = 0`.
    pub fn initial_state(&self) -> Result<IterateState> {
        let rho = vec![self.config.volume_fraction; self.n_rho()];
        let (u, p) = self.solve_stokes_brinkman(&rho)?;
        Ok(IterateState { rho, u, p, lambda: 0.0 })
    }

    /// Solves the linear Brinkman-Stokes system for fixed `rho` with a sparse
    /// direct method. Pressure is normalized to zero mean.
    pub fn solve_stokes_brinkman(&self, rho: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (nu, np) = (self.n_u(), self.n_p());
        let a = self.constrained_momentum(rho);
        let b = &self.divergence_free_cols;
        let mut t: Vec<(usize, usize, f64)> = a.triplets().collect();
        for (i, j, v) in b.triplets() {
            t.push((nu + i, j, v));
            t.push((j, nu + i, v));
        }
        // bordering row enforcing zero mean pressure
        for (k, &area) in self.mesh.areas.iter().enumerate() {
            t.push((nu + np, nu + k, area));
            t.push((nu + k, nu + np, area));
        }
        let n = nu + np + 1;
        let mat = CsrMatrix::from_triplets(n, n, &t);

        // Move the known boundary values to the right-hand side.
        let mut lift = vec![0.0; nu];
        for i in 0..nu {
            if self.boundary.constrained[i] {
                lift[i] = self.boundary.values[i];
            }
        }
        let full_a = self.assemble_momentum(rho);
        let a_lift = full_a.matvec(&lift);
        let b_lift = self.divergence.matvec(&lift);
        let mut rhs = vec![0.0; n];
        for i in 0..nu {
            rhs[i] = if self.boundary.constrained[i] { lift[i] } else { self.load[i] - a_lift[i] };
        }
        for k in 0..np {
            rhs[nu + k] = -b_lift[k];
        }
        let x = SparseLu::factor(&mat)?.solve(&rhs);
        Ok((x[..nu].to_vec(), x[nu..nu + np].to_vec()))
    }

    /// `J(u, rho) = 1/2 int alpha(rho)|u|^2 + nu |grad_h u|^2 - int f . u`.
    pub fn objective(&self, state: &IterateState) -> f64 {
        let speed2 = self.cell_speed_squared(&state.u);
        let mut j = 0.0;
        for c in 0..self.mesh.num_cells() {
            let field = self.velocity.local_field(&state.u, c);
            let g = field.gradient;
            let grad2 = g[0][0].powi(2) + g[0][1].powi(2) + g[1][0].powi(2) + g[1][1].powi(2);
            j += 0.5 * (self.config.alpha(state.rho[c]) * speed2[c] + self.config.viscosity * self.mesh.areas[c] * grad2);
        }
        if let Some(force) = &self.force {
            let quad = cell_quadrature(6).expect("supported degree");
            for c in 0..self.mesh.num_cells() {
                for (b, w) in &quad {
                    let x = map_point(&self.mesh, c, *b);
                    let f = force(x);
                    let v = self.velocity.eval(&state.u, c, x);
                    j -= 2.0 * self.mesh.areas[c] * w * (f[0] * v[0] + f[1] * v[1]);
                }
            }
        }
        j
    }

    /// `|div u|_{L^2}`.
    pub fn divergence_norm(&self, u: &[f64]) -> f64 {
        (0..self.mesh.num_cells())
            .map(|c| self.mesh.areas[c] * self.velocity.cell_divergence(u, c).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// `|rho - other|_{L^2}^2`.
    pub fn material_distance_squared(&self, rho: &[f64], other: &[f64]) -> f64 {
        self.mesh.areas.iter().zip(rho.iter().zip(other)).map(|(a, (x, y))| a * (x - y).powi(2)).sum()
    }

    /// Broken `H^1` norm of `u` relative to the problem's boundary data.
    pub fn broken_h1_norm(&self, u: &[f64]) -> f64 {
        broken_h1_distance(&self.velocity, u, None, self.boundary.g.as_ref())
    }
}

/// `(grad phi) n`
fn grad_times(phi: &BasisFunction, n: [f64; 2]) -> [f64; 2] {
    let g = &phi.gradient;
    [g[0][0] * n[0] + g[0][1] * n[1], g[1][0] * n[0] + g[1][1] * n[1]]
}

fn cell_mass(space: &VelocitySpace, cell: usize) -> [f64; 36] {
    let mesh = space.mesh();
    let basis = space.cell_basis(cell);
    let xc = space.centroid(cell);
    let mut m = [0.0; 36];
    for (b, w) in cell_quadrature(4).expect("supported degree") {
        let x = map_point(mesh, cell, b);
        let vals: Vec<[f64; 2]> = basis.iter().map(|phi| phi.eval(xc, x)).collect();
        let jw = 2.0 * mesh.areas[cell] * w;
        for i in 0..6 {
            for j in 0..6 {
                m[6 * i + j] += jw * (vals[i][0] * vals[j][0] + vals[i][1] * vals[j][1]);
            }
        }
    }
    // exact symmetry
    for i in 0..6 {
        for j in 0..i {
            let s = 0.5 * (m[6 * i + j] + m[6 * j + i]);
            m[6 * i + j] = s;
            m[6 * j + i] = s;
        }
    }
    m
}

/// Viscous cell terms and all facet terms of the broken form; these do not
/// depend on the material.
fn assemble_static_momentum(space: &VelocitySpace, cfg: &ProblemConfig) -> CsrMatrix {
    let mesh = space.mesh();
    let nu = cfg.viscosity;
    let mut t: Vec<(usize, usize, f64)> = Vec::new();
    for c in 0..mesh.num_cells() {
        let dofs = space.cell_dofs(c);
        let basis = space.cell_basis(c);
        let area = mesh.areas[c];
        for i in 0..6 {
            for j in 0..=i {
                let (gi, gj) = (&basis[i].gradient, &basis[j].gradient);
                let v = nu * area * (gi[0][0] * gj[0][0] + gi[0][1] * gj[0][1] + gi[1][0] * gj[1][0] + gi[1][1] * gj[1][1]);
                t.push((dofs[i], dofs[j], v));
                if i != j {
                    t.push((dofs[j], dofs[i], v));
                }
            }
        }
    }

    for (e, facet) in mesh.facets.iter().enumerate() {
        let n = facet.normal;
        let mut sides = vec![(facet.cells.0, n)];
        if let Some(other) = facet.cells.1 {
            sides.push((other, [-n[0], -n[1]]));
        }
        let avg = if sides.len() == 2 { 0.5 } else { 1.0 };
        let pen = nu * cfg.penalty / facet.length;
        // local index k runs over (side, basis) pairs
        let dofs: Vec<usize> = sides.iter().flat_map(|&(c, _)| space.cell_dofs(c)).collect();
        let m = dofs.len();
        let mut local = vec![0.0; m * m];
        for (s, w) in facet_quadrature() {
            let x = facet_point(mesh, e, s);
            let ds = w * facet.length;
            let mut vals = Vec::with_capacity(m);
            let mut normals = Vec::with_capacity(m);
            let mut funcs = Vec::with_capacity(m);
            for &(c, nc) in &sides {
                let xc = space.centroid(c);
                for phi in space.cell_basis(c) {
                    vals.push(phi.eval(xc, x));
                    normals.push(nc);
                    funcs.push(*phi);
                }
            }
            for a in 0..m {
                for b in 0..=a {
                    let nn = normals[a][0] * normals[b][0] + normals[a][1] * normals[b][1];
                    let vv = vals[a][0] * vals[b][0] + vals[a][1] * vals[b][1];
                    let gb = grad_times(&funcs[b], normals[a]);
                    let ga = grad_times(&funcs[a], normals[b]);
                    let cons_b = gb[0] * vals[a][0] + gb[1] * vals[a][1];
                    let cons_a = ga[0] * vals[b][0] + ga[1] * vals[b][1];
                    let v = ds * (pen * vv * nn - nu * avg * (cons_b + cons_a));
                    local[a * m + b] += v;
                    if a != b {
                        local[b * m + a] += v;
                    }
                }
            }
        }
        for a in 0..m {
            for b in 0..m {
                t.push((dofs[a], dofs[b], local[a * m + b]));
            }
        }
    }
    let n = space.dim();
    let mut a = CsrMatrix::from_triplets(n, n, &t);
    symmetrize(&mut a);
    a
}

/// Averages `A` with its transpose to remove accumulation-order roundoff.
fn symmetrize(a: &mut CsrMatrix) {
    let at = a.transpose();
    *a = a.add(1.0, &at).scale(0.5);
}

fn assemble_divergence(space: &VelocitySpace) -> CsrMatrix {
    let mesh = space.mesh();
    let mut t = Vec::with_capacity(6 * mesh.num_cells());
    for c in 0..mesh.num_cells() {
        for (phi, &dof) in space.cell_basis(c).iter().zip(&space.cell_dofs(c)) {
            t.push((c, dof, -mesh.areas[c] * phi.divergence()));
        }
    }
    CsrMatrix::from_triplets(mesh.num_cells(), space.dim(), &t)
}

/// Exact velocity and its gradient, for error measurement.
pub struct ExactVelocity<'a> {
    pub value: &'a dyn Fn(Point) -> [f64; 2],
    pub gradient: &'a dyn Fn(Point) -> [[f64; 2]; 2],
}

/// Broken `H^1` distance between the discrete field `u` and `exact` (zero if
/// `None`), with boundary jumps measured against `g`.
pub fn broken_h1_distance(
    space: &VelocitySpace,
    u: &[f64],
    exact: Option<&ExactVelocity<'_>>,
    g: &dyn Fn(Point) -> [f64; 2],
) -> f64 {
    let mesh = space.mesh();
    let quad = cell_quadrature(6).expect("supported degree");
    let mut total = 0.0;
    for c in 0..mesh.num_cells() {
        let field = space.local_field(u, c);
        let xc = space.centroid(c);
        for (b, w) in &quad {
            let x = map_point(mesh, c, *b);
            let mut v = field.eval(xc, x);
            let mut gr = field.gradient;
            if let Some(ex) = exact {
                let ev = (ex.value)(x);
                let eg = (ex.gradient)(x);
                for i in 0..2 {
                    v[i] -= ev[i];
                    for j in 0..2 {
                        gr[i][j] -= eg[i][j];
                    }
                }
            }
            let jw = 2.0 * mesh.areas[c] * w;
            total += jw * (v[0] * v[0] + v[1] * v[1]);
            total += jw * (gr[0][0].powi(2) + gr[0][1].powi(2) + gr[1][0].powi(2) + gr[1][1].powi(2));
        }
    }
    for (e, facet) in mesh.facets.iter().enumerate() {
        let pieces = if facet.is_boundary() { BOUNDARY_PIECES } else { 1 };
        let h = 1.0 / pieces as f64;
        for k in 0..pieces {
            for (t, w) in facet_quadrature() {
                let x = facet_point(mesh, e, (k as f64 + t) * h);
                let ds = w * h * facet.length;
                let a = space.eval(u, facet.cells.0, x);
                let jump = match facet.cells.1 {
                    Some(other) => {
                        let b = space.eval(u, other, x);
                        [a[0] - b[0], a[1] - b[1]]
                    }
                    None => {
                        let gv = g(x);
                        [a[0] - gv[0], a[1] - gv[1]]
                    }
                };
                total += ds / facet.length * (jump[0] * jump[0] + jump[1] * jump[1]);
            }
        }
    }
    total.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{symmetric_eigenvalues, DenseMatrix};
    use crate::mesh::build_rect_mesh;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_problem(nx: usize, ny: usize, g: VelocityField) -> Problem {
        let mesh = Arc::new(build_rect_mesh(1.0, 1.0, nx, ny).unwrap());
        Problem::new(mesh, ProblemConfig::default(), g, None).unwrap()
    }

    fn zero_g() -> VelocityField {
        Arc::new(|_| [0.0, 0.0])
    }

    #[test]
    fn alpha_values() {
        let cfg = ProblemConfig::default();
        assert_eq!(cfg.alpha(0.0), 2.5e4);
        assert!(cfg.alpha(1.0).abs() < 1e-10);
        // oracle: 2.5e4 * (1 - 0.5 * 1.1 / 0.6)
        assert!((cfg.alpha(0.5) - 2.5e4 / 12.0).abs() < 1e-9);
        assert!((cfg.alpha_prime(0.0) + 2.75e5).abs() < 1e-6);
        let h = 1e-6;
        for r in [0.1, 0.4, 0.9] {
            let fd = (cfg.alpha(r + h) - cfg.alpha(r - h)) / (2.0 * h);
            assert!((fd - cfg.alpha_prime(r)).abs() < 1e-5 * cfg.alpha_prime(r).abs());
            let fd2 = (cfg.alpha_prime(r + h) - cfg.alpha_prime(r - h)) / (2.0 * h);
            assert!((fd2 - cfg.alpha_second(r)).abs() < 1e-5 * cfg.alpha_second(r).abs());
        }
    }

    #[test]
    fn momentum_is_symmetric() {
        let p = Problem::double_pipe(3, 2, ProblemConfig::default()).unwrap();
        let rho: Vec<f64> = (0..p.n_rho()).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let a = p.assemble_momentum(&rho);
        assert!(a.asymmetry() <= 1e-13 * a.max_abs());
    }

    #[test]
    fn fluid_momentum_has_no_brinkman_part() {
        let p = unit_problem(1, 1, zero_g());
        let a = p.assemble_momentum(&[1.0, 1.0]);
        let diff = a.add(-1.0, &p.static_momentum);
        assert!(diff.max_abs() < 1e-9 * a.max_abs());
    }

    #[test]
    fn constrained_momentum_is_positive_definite() {
        for (nx, ny) in [(1, 1), (2, 1), (2, 2)] {
            let p = unit_problem(nx, ny, zero_g());
            for rho in [0.0, 1.0] {
                let a = p.constrained_momentum(&vec![rho; p.n_rho()]);
                let ev = symmetric_eigenvalues(&a.to_dense());
                assert!(ev[0] > 0.0, "mesh {nx}x{ny}, rho {rho}: smallest eigenvalue {}", ev[0]);
            }
        }
    }

    #[test]
    fn divergence_of_constant_field_vanishes() {
        let p = unit_problem(2, 2, zero_g());
        let u = p.velocity_space().interpolate(&|_| [1.0, 0.0], 1);
        assert!(crate::linalg::max_abs(&p.divergence().matvec(&u)) < 1e-12);
        let kdiv = p.assemble_div_div(1e4);
        assert!(crate::linalg::max_abs(&kdiv.matvec(&u)) < 1e-8);
    }

    #[test]
    fn divergence_has_rank_deficiency_one() {
        let p = unit_problem(2, 2, zero_g());
        let b = p.divergence_free_cols().to_dense().to_nalgebra();
        let sv = b.svd(false, false).singular_values;
        let tol = 1e-10 * sv.max();
        let rank = sv.iter().filter(|s| **s > tol).count();
        assert_eq!(rank, p.n_p() - 1);
    }

    #[test]
    fn div_div_matches_triple_product() {
        let p = unit_problem(2, 2, zero_g());
        let gamma = 1e4;
        let k = p.assemble_div_div(gamma).to_dense();
        let b = p.divergence().to_dense();
        let minv = DenseMatrix::from_fn(p.n_p(), p.n_p(), |i, j| if i == j { 1.0 / p.mesh().areas[i] } else { 0.0 });
        let triple = b.transpose().matmul(&minv).matmul(&b);
        for i in 0..p.n_u() {
            for j in 0..p.n_u() {
                assert!((k[(i, j)] - gamma * triple[(i, j)]).abs() <= 1e-10 * gamma);
            }
        }
        assert_eq!(p.assemble_div_div(0.0).max_abs(), 0.0);
        let ev = symmetric_eigenvalues(&k);
        assert!(ev[0] >= -1e-8 * gamma);
    }

    #[test]
    fn c_mu_single_cell_value() {
        let mesh = Arc::new(build_rect_mesh(1.5, 1.0, 3, 2).unwrap());
        let p = Problem::new(mesh, ProblemConfig::default(), zero_g(), None).unwrap();
        let state = IterateState { rho: vec![0.5; 12], u: vec![0.0; p.n_u()], p: vec![0.0; 12], lambda: 0.0 };
        let mut active = vec![false; 12];
        active[3] = true;
        let c = p.assemble_c_mu(&state, 1.0, &active);
        // oracle: 0.125 * 2 / 0.5001^2
        let expected = 0.125 * 2.0 / (0.5001f64 * 0.5001);
        assert!((c[0] - expected).abs() < 1e-12);
        assert!((expected - 0.99960).abs() < 1e-5);
        assert_eq!(c[3], 1.0);
        let c0 = p.assemble_c_mu(&state, 0.0, &active);
        assert!(c0.iter().enumerate().all(|(i, &v)| if i == 3 { v == 1.0 } else { v == 0.0 }));
    }

    #[test]
    fn d_and_e_blocks() {
        let p = unit_problem(2, 2, zero_g());
        let mut state = IterateState { rho: vec![0.3; 8], u: vec![0.0; p.n_u()], p: vec![0.0; 8], lambda: 0.0 };
        let (d, e) = p.assemble_d_e(&state, &[false; 8]);
        assert_eq!(d.max_abs(), 0.0);
        assert!(e.iter().all(|&v| (v + 0.125).abs() < 1e-15));
        state.u = (0..p.n_u()).map(|i| (i as f64).cos()).collect();
        let (d, e) = p.assemble_d_e(&state, &[true; 8]);
        assert_eq!(d.max_abs(), 0.0);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn volume_residual_vanishes_at_target() {
        let p = Problem::double_pipe(3, 2, ProblemConfig::default()).unwrap();
        let s = p.initial_state().unwrap();
        assert!(p.residual(&s, 1.0).unwrap().lambda.abs() < 1e-15);
        let mut bad = s.clone();
        bad.rho[0] = 1.5;
        assert!(matches!(p.residual(&bad, 1.0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn double_pipe_flux_balances() {
        let p = Problem::double_pipe(12, 8, ProblemConfig::default()).unwrap();
        let mesh = p.mesh();
        let mut net = 0.0;
        let mut inflow = 0.0;
        for (e, f) in mesh.facets.iter().enumerate() {
            if f.is_boundary() {
                let v = p.boundary().values[2 * e];
                net += v;
                if v < 0.0 {
                    inflow -= v;
                }
            }
        }
        assert!(net.abs() < 1e-14);
        // each parabola carries 1/6 - 144 * 2 (1/12)^3 / 3 = 1/9
        assert!((inflow - 2.0 / 9.0).abs() < 1e-5, "inflow {inflow}");
    }

    #[test]
    fn stokes_solution_is_divergence_free() {
        let p = Problem::double_pipe(6, 4, ProblemConfig::default()).unwrap();
        let s = p.initial_state().unwrap();
        assert!(p.divergence_norm(&s.u) <= 1e-10);
        let r = p.residual(&s, 0.0).unwrap();
        assert!(crate::linalg::norm2(&r.u) < 1e-9);
        assert!(crate::linalg::norm2(&r.p) < 1e-12);
    }

    #[test]
    fn smooth_interpolant_has_small_jumps() {
        let p = unit_problem(3, 3, Arc::new(|x| [x[1], -x[0]]));
        let u = p.velocity_space().interpolate(&|x| [x[1], -x[0]], 1);
        // L2 plus gradient part of (y, -x) on the unit square: 2/3 + 2.
        let n = p.broken_h1_norm(&u);
        assert!((n * n - (2.0 / 3.0 + 2.0)).abs() < 1e-10);
        let zero = unit_problem(2, 2, zero_g());
        assert_eq!(zero.broken_h1_norm(&vec![0.0; zero.n_u()]), 0.0);
    }

    #[test]
    fn polynomial_stokes_solution_is_reproduced() {
        // u = (y, -x) with p = 0 solves Stokes with zero force and lies in BDM1.
        let g: VelocityField = Arc::new(|x| [x[1], -x[0]]);
        let mut cfg = ProblemConfig::default();
        cfg.alpha_max = 1.0;
        let mesh = Arc::new(build_rect_mesh(1.0, 1.0, 3, 3).unwrap());
        let p = Problem::new(mesh, cfg, g.clone(), None).unwrap();
        let (u, pr) = p.solve_stokes_brinkman(&vec![1.0; p.n_rho()]).unwrap();
        let exact = p.velocity_space().interpolate(g.as_ref(), 1);
        let err = u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "error {err}");
        assert!(crate::linalg::max_abs(&pr) < 1e-9);
    }

    /// True Jacobian applied to a direction, `S H S dz`.
    fn true_jacobian_apply(h: &BlockSystem, dz: &[f64]) -> Vec<f64> {
        let mut x = dz.to_vec();
        let last = x.len() - 1;
        x[last] = -x[last];
        let mut y = vec![0.0; x.len()];
        h.apply(&x, &mut y);
        y[last] = -y[last];
        y
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn jacobian_matches_finite_differences(seed in 0u64..10_000) {
            let p = Problem::double_pipe(3, 2, ProblemConfig::default()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut state = p.initial_state().unwrap();
            for r in state.rho.iter_mut() {
                *r = rng.random_range(0.2..0.8);
            }
            for (i, v) in state.u.iter_mut().enumerate() {
                if !p.boundary().constrained[i] {
                    *v += rng.random_range(-0.5..0.5);
                }
            }
            for v in state.p.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            state.lambda = rng.random_range(-1.0..1.0);
            let mu = 0.3;
            let active = vec![false; p.n_rho()];
            let h = p.jacobian(&state, mu, &active).unwrap();
            let z = state.to_vec();
            let mut dz: Vec<f64> = (0..z.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            for i in 0..p.n_u() {
                if p.boundary().constrained[i] {
                    dz[p.n_rho() + i] = 0.0;
                }
            }
            let jdz = true_jacobian_apply(&h, &dz);
            let eval = |t: f64| {
                let zt: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + t * b).collect();
                let s = IterateState::from_slice(&zt, p.n_rho(), p.n_u(), p.n_p());
                p.residual(&s, mu).unwrap().to_vec()
            };
            let mut best = f64::INFINITY;
            for step in [1e-4, 1e-5, 1e-6, 1e-7] {
                let (fp, fm) = (eval(step), eval(-step));
                let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * step)).collect();
                let diff: Vec<f64> = fd.iter().zip(&jdz).map(|(a, b)| a - b).collect();
                // constrained velocity rows are identity in the residual and zero in dz
                best = best.min(crate::linalg::norm2(&diff) / crate::linalg::norm2(&jdz));
            }
            prop_assert!(best <= 1e-6, "relative error {best}");
        }
    }
}
