//! Geometric multigrid for the augmented momentum block.
//!
//! Coarse operators are rediscretized from injected iterates, with coarse
//! active sets derived from the fine one by a child-count threshold. The
//! smoother is a short FGMRES run preconditioned by additive vertex-star
//! patch solves.

use serde::{Deserialize, Serialize};

use crate::assembly::{IterateState, Problem};
use crate::error::{Error, Result};
use crate::fem_spaces::{facet_point, facet_quadrature, moment_weights, VelocitySpace};
use crate::linalg::{
    axpy, fgmres, CsrMatrix, DenseLu, DenseMatrix, FnPreconditioner, KrylovConfig, Preconditioner,
};
use crate::mesh::{Mesh, MeshHierarchy, Point};
use crate::preconditioner::{build_augmented_momentum, MomentumContext, MomentumSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CycleType {
    V,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MgConfig {
    pub levels: usize,
    pub cycle: CycleType,
    pub smoother_steps: usize,
    /// A coarse cell is active when at least this many children are.
    pub coarse_threshold: usize,
    pub atol: f64,
    pub rtol: f64,
    pub max_iter: usize,
}

impl Default for MgConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            cycle: CycleType::Full,
            smoother_steps: 5,
            coarse_threshold: MeshHierarchy::CHILDREN_PER_PARENT / 2,
            atol: 1e-8,
            rtol: 1e-9,
            max_iter: 200,
        }
    }
}

impl MgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::InvalidArgument(format!("multigrid needs at least 2 levels, got {}", self.levels)));
        }
        if !(1..=MeshHierarchy::CHILDREN_PER_PARENT).contains(&self.coarse_threshold) {
            return Err(Error::InvalidArgument(format!("coarse threshold {} outside [1, 4]", self.coarse_threshold)));
        }
        if self.smoother_steps == 0 || self.max_iter == 0 {
            return Err(Error::InvalidArgument("smoother steps and iteration cap must be positive".into()));
        }
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(Error::InvalidArgument("multigrid tolerances must be positive".into()));
        }
        Ok(())
    }
}

fn barycentric(mesh: &Mesh, cell: usize, x: Point) -> [f64; 3] {
    let [a, b, c] = mesh.cell_vertices(cell);
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let l1 = ((x[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (x[1] - a[1])) / det;
    let l2 = ((b[0] - a[0]) * (x[1] - a[1]) - (x[0] - a[0]) * (b[1] - a[1])) / det;
    [1.0 - l1 - l2, l1, l2]
}

fn contains(mesh: &Mesh, cell: usize, x: Point) -> bool {
    barycentric(mesh, cell, x).iter().all(|&l| l >= -1e-10)
}

/// Matrix of the embedding of the coarse BDM1 space into the fine one: fine
/// edge moments of every coarse basis function.
pub fn build_prolongation(coarse: &VelocitySpace, fine: &VelocitySpace, parent: &[usize]) -> Result<CsrMatrix> {
    let (cm, fm) = (coarse.mesh(), fine.mesh());
    if parent.len() != fm.num_cells() || parent.iter().any(|&p| p >= cm.num_cells()) {
        return Err(Error::InvalidArgument("parent map does not match the meshes".into()));
    }
    let mut t = Vec::with_capacity(12 * fm.num_facets());
    for (f, facet) in fm.facets.iter().enumerate() {
        let c = parent[facet.cells.0];
        let ends = facet.vertices.map(|v| fm.vertices[v]);
        if !ends.iter().all(|&x| contains(cm, c, x)) {
            return Err(Error::InvalidArgument(format!("fine facet {f} is not inside its parent cell {c}")));
        }
        let dofs = coarse.cell_dofs(c);
        let basis = coarse.cell_basis(c);
        let xc = coarse.centroid(c);
        let n = facet.normal;
        for (phi, &j) in basis.iter().zip(&dofs) {
            let mut m = [0.0; 2];
            for (s, w) in facet_quadrature() {
                let v = phi.eval(xc, facet_point(fm, f, s));
                let vn = v[0] * n[0] + v[1] * n[1];
                let q = moment_weights(s);
                m[0] += w * facet.length * vn * q[0];
                m[1] += w * facet.length * vn * q[1];
            }
            t.push((2 * f, j, m[0]));
            t.push((2 * f + 1, j, m[1]));
        }
    }
    // Coarse facets shared by two parents are visited once per fine facet,
    // so no entry is duplicated.
    Ok(CsrMatrix::from_triplets(fine.dim(), coarse.dim(), &t).prune())
}

/// Coarse cell active iff at least `threshold` of its children are.
pub fn coarsen_active_set(fine_active: &[bool], children: &[Vec<usize>], threshold: usize) -> Vec<bool> {
    children.iter().map(|ch| ch.iter().filter(|&&f| fine_active[f]).count() >= threshold).collect()
}

/// Area-weighted mean of the children values.
pub fn inject_scalar(fine: &[f64], fine_mesh: &Mesh, children: &[Vec<usize>]) -> Vec<f64> {
    children
        .iter()
        .map(|ch| {
            let area: f64 = ch.iter().map(|&f| fine_mesh.areas[f]).sum();
            ch.iter().map(|&f| fine[f] * fine_mesh.areas[f]).sum::<f64>() / area
        })
        .collect()
}

/// Coarse edge moments of a fine velocity field.
pub fn inject_velocity(
    fine_u: &[f64],
    coarse: &VelocitySpace,
    fine: &VelocitySpace,
    children: &[Vec<usize>],
) -> Vec<f64> {
    let (cm, fm) = (coarse.mesh(), fine.mesh());
    let mut out = vec![0.0; coarse.dim()];
    // Each coarse facet is split in two; integrate each half separately so
    // the quadrature sees a polynomial.
    for (e, facet) in cm.facets.iter().enumerate() {
        let n = facet.normal;
        let kids = &children[facet.cells.0];
        let mut m = [0.0; 2];
        for half in 0..2 {
            for (t, w) in facet_quadrature() {
                let s = 0.5 * (half as f64 + t);
                let x = facet_point(cm, e, s);
                let cell = kids.iter().copied().find(|&k| contains(fm, k, x)).expect("nested refinement");
                let v = fine.eval(fine_u, cell, x);
                let vn = v[0] * n[0] + v[1] * n[1];
                let q = moment_weights(s);
                let ds = 0.5 * w * facet.length;
                m[0] += ds * vn * q[0];
                m[1] += ds * vn * q[1];
            }
        }
        out[2 * e] = m[0];
        out[2 * e + 1] = m[1];
    }
    out
}

/// Velocity dofs on the facets incident to each vertex, skipping constrained
/// dofs. Vertices whose patch would be empty get no patch.
pub fn vertex_patch_dofs(mesh: &Mesh, constrained: &[bool]) -> Vec<Vec<usize>> {
    (0..mesh.num_vertices())
        .filter_map(|v| {
            let facets = mesh.vertex_star_facets(v).expect("vertex in range");
            let dofs: Vec<usize> =
                facets.iter().flat_map(|&f| [2 * f, 2 * f + 1]).filter(|&d| !constrained[d]).collect();
            (!dofs.is_empty()).then_some(dofs)
        })
        .collect()
}

enum PatchInverse {
    Lu(DenseLu),
    Pseudo(DenseMatrix),
}

struct Patch {
    dofs: Vec<usize>,
    inverse: PatchInverse,
}

/// Additive vertex-star Schwarz sweep for one matrix.
pub struct PatchDecomposition {
    patches: Vec<Patch>,
    constrained: Vec<usize>,
}

impl PatchDecomposition {
    pub fn new(mesh: &Mesh, matrix: &CsrMatrix, constrained: &[bool]) -> Self {
        let patches = vertex_patch_dofs(mesh, constrained)
            .into_iter()
            .map(|dofs| {
                let block = matrix.principal_submatrix(&dofs);
                let inverse = match DenseLu::factor(&block) {
                    Ok(lu) => PatchInverse::Lu(lu),
                    Err(_) => {
                        log::warn!("singular patch block of size {}; using a pseudoinverse", dofs.len());
                        let pinv = block.to_nalgebra().pseudo_inverse(1e-12).expect("non-negative epsilon");
                        PatchInverse::Pseudo(DenseMatrix::from_nalgebra(&pinv))
                    }
                };
                Patch { dofs, inverse }
            })
            .collect();
        let constrained = constrained.iter().enumerate().filter(|(_, &c)| c).map(|(i, _)| i).collect();
        Self { patches, constrained }
    }

    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }

    pub fn patch_sizes(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.dofs.len()).collect()
    }

    /// `z = sum_i R_i^T A_i^{-1} R_i r`; constrained rows are identity rows
    /// and are copied through.
    pub fn sweep(&self, r: &[f64], z: &mut [f64]) {
        z.iter_mut().for_each(|v| *v = 0.0);
        let mut local = Vec::new();
        for patch in &self.patches {
            local.clear();
            local.extend(patch.dofs.iter().map(|&d| r[d]));
            let corr = match &patch.inverse {
                PatchInverse::Lu(lu) => lu.solve(&local),
                PatchInverse::Pseudo(p) => p.matvec(&local),
            };
            for (&d, c) in patch.dofs.iter().zip(corr) {
                z[d] += c;
            }
        }
        for &i in &self.constrained {
            z[i] = r[i];
        }
    }
}

impl Preconditioner for &PatchDecomposition {
    fn apply(&mut self, r: &[f64], z: &mut [f64]) -> Result<()> {
        self.sweep(r, z);
        Ok(())
    }
}

/// Exactly `steps` FGMRES iterations on `matrix` from `x0`, preconditioned by
/// one additive patch sweep.
pub fn patch_relax(
    matrix: &CsrMatrix,
    rhs: &[f64],
    x0: &[f64],
    patches: &PatchDecomposition,
    steps: usize,
) -> Result<Vec<f64>> {
    let cfg = KrylovConfig::new(f64::MIN_POSITIVE, f64::MIN_POSITIVE, steps)?;
    let mut pc = patches;
    Ok(fgmres(matrix, rhs, &mut pc, Some(x0), &cfg)?.x)
}

struct Level {
    matrix: CsrMatrix,
    constrained: Vec<bool>,
    patches: Option<PatchDecomposition>,
}

/// Multigrid hierarchy of augmented momentum operators for one Newton step.
pub struct MgHierarchy {
    levels: Vec<Level>,
    /// `prolongations[l]` maps level `l` to level `l + 1`.
    prolongations: Vec<CsrMatrix>,
    coarse_lu: DenseLu,
    cfg: MgConfig,
}

impl MgHierarchy {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest_matrix(&self) -> &CsrMatrix {
        &self.levels.last().expect("non-empty").matrix
    }

    pub fn level_matrix(&self, level: usize) -> &CsrMatrix {
        &self.levels[level].matrix
    }

    fn restrict(&self, level: usize, r: &[f64]) -> Vec<f64> {
        let mut rc = self.prolongations[level - 1].transpose_matvec(r);
        zero_masked(&mut rc, &self.levels[level - 1].constrained);
        rc
    }

    fn smooth(&self, level: usize, b: &[f64], x: &mut Vec<f64>) -> Result<()> {
        let lv = &self.levels[level];
        *x = patch_relax(&lv.matrix, b, x, lv.patches.as_ref().expect("fine levels have patches"), self.cfg.smoother_steps)?;
        Ok(())
    }

    fn v_cycle(&self, level: usize, b: &[f64], x: &mut Vec<f64>) -> Result<()> {
        if level == 0 {
            *x = self.coarse_lu.solve(b);
            return Ok(());
        }
        self.smooth(level, b, x)?;
        let mut r = b.to_vec();
        axpy(-1.0, &self.levels[level].matrix.matvec(x), &mut r);
        let rc = self.restrict(level, &r);
        let mut ec = vec![0.0; rc.len()];
        self.v_cycle(level - 1, &rc, &mut ec)?;
        zero_masked(&mut ec, &self.levels[level - 1].constrained);
        axpy(1.0, &self.prolongations[level - 1].matvec(&ec), x);
        self.smooth(level, b, x)
    }

    /// One cycle from a zero initial guess.
    pub fn cycle(&self, b: &[f64]) -> Result<Vec<f64>> {
        let top = self.levels.len() - 1;
        match self.cfg.cycle {
            CycleType::V => {
                let mut x = vec![0.0; b.len()];
                self.v_cycle(top, b, &mut x)?;
                Ok(x)
            }
            CycleType::Full => {
                let mut rhs = vec![b.to_vec()];
                for l in (1..=top).rev() {
                    let rc = self.restrict(l, rhs.last().expect("non-empty"));
                    rhs.push(rc);
                }
                rhs.reverse();
                let mut x = self.coarse_lu.solve(&rhs[0]);
                for (l, bl) in rhs.iter().enumerate().skip(1) {
                    zero_masked(&mut x, &self.levels[l - 1].constrained);
                    let mut xl = self.prolongations[l - 1].matvec(&x);
                    self.v_cycle(l, bl, &mut xl)?;
                    x = xl;
                }
                Ok(x)
            }
        }
    }
}

fn zero_masked(v: &mut [f64], mask: &[bool]) {
    for (x, &m) in v.iter_mut().zip(mask) {
        if m {
            *x = 0.0;
        }
    }
}

/// FGMRES on the finest operator preconditioned by one multigrid cycle.
/// Returns the solution and the iteration count.
pub fn mg_solve(hierarchy: &MgHierarchy, rhs: &[f64]) -> Result<(Vec<f64>, usize)> {
    let cfg = &hierarchy.cfg;
    let kcfg = KrylovConfig::new(cfg.atol, cfg.rtol, cfg.max_iter)?;
    let mut pc = FnPreconditioner(|r: &[f64], z: &mut [f64]| {
        z.copy_from_slice(&hierarchy.cycle(r)?);
        Ok(())
    });
    let sol = fgmres(hierarchy.finest_matrix(), rhs, &mut pc, None, &kcfg)?;
    if !sol.converged {
        return Err(Error::MomentumSolver(format!(
            "multigrid-preconditioned FGMRES stalled at residual {:.3e} after {} iterations",
            sol.final_residual(),
            sol.iterations
        )));
    }
    Ok((sol.x, sol.iterations))
}

/// Momentum solver backed by [`MgHierarchy`], rebuilt every Newton step.
pub struct MultigridSolver {
    cfg: MgConfig,
    /// Problems on all but the finest level, coarse first.
    coarse_problems: Vec<Problem>,
    spaces: Vec<VelocitySpace>,
    children: Vec<Vec<Vec<usize>>>,
    prolongations: Vec<CsrMatrix>,
    hierarchy: Option<MgHierarchy>,
    iterations: usize,
    solves: usize,
}

impl MultigridSolver {
    /// `fine` must be discretized on the finest mesh of `meshes`.
    pub fn new(fine: &Problem, meshes: &MeshHierarchy, cfg: MgConfig) -> Result<Self> {
        cfg.validate()?;
        if meshes.num_levels() != cfg.levels {
            return Err(Error::InvalidArgument(format!(
                "configured {} levels but the mesh hierarchy has {}",
                cfg.levels,
                meshes.num_levels()
            )));
        }
        if !std::sync::Arc::ptr_eq(fine.mesh(), meshes.finest()) {
            return Err(Error::InvalidArgument("the fine problem is not posed on the finest mesh".into()));
        }
        let top = meshes.num_levels() - 1;
        let coarse_problems =
            meshes.levels[..top].iter().map(|m| fine.on_mesh(m.clone())).collect::<Result<Vec<_>>>()?;
        let mut spaces: Vec<VelocitySpace> = coarse_problems.iter().map(|p| p.velocity_space().clone()).collect();
        spaces.push(fine.velocity_space().clone());
        let children = (0..top).map(|l| meshes.children(l)).collect();
        let prolongations = (0..top)
            .map(|l| build_prolongation(&spaces[l], &spaces[l + 1], &meshes.parent_maps[l]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, coarse_problems, spaces, children, prolongations, hierarchy: None, iterations: 0, solves: 0 })
    }

    pub fn hierarchy(&self) -> Option<&MgHierarchy> {
        self.hierarchy.as_ref()
    }

    /// Injected states and coarse active sets, coarse first, excluding the
    /// finest level.
    pub fn inject(&self, state: &IterateState, active: &[bool]) -> Vec<(IterateState, Vec<bool>)> {
        let top = self.coarse_problems.len();
        let mut out = Vec::with_capacity(top);
        let (mut rho, mut u, mut act) = (state.rho.clone(), state.u.clone(), active.to_vec());
        for l in (0..top).rev() {
            let fine_mesh = self.spaces[l + 1].mesh();
            rho = inject_scalar(&rho, fine_mesh, &self.children[l]);
            u = inject_velocity(&u, &self.spaces[l], &self.spaces[l + 1], &self.children[l]);
            act = coarsen_active_set(&act, &self.children[l], self.cfg.coarse_threshold);
            let p = vec![0.0; self.coarse_problems[l].n_p()];
            out.push((IterateState { rho: rho.clone(), u: u.clone(), p, lambda: state.lambda }, act.clone()));
        }
        out.reverse();
        out
    }
}

impl MomentumSolver for MultigridSolver {
    fn rebuild(&mut self, ctx: &MomentumContext<'_>) -> Result<()> {
        let injected = self.inject(ctx.state, &ctx.blocks.active);
        let mut levels = Vec::with_capacity(self.cfg.levels);
        for (problem, (state, active)) in self.coarse_problems.iter().zip(&injected) {
            let blocks = problem.jacobian(state, ctx.mu, active)?;
            let matrix = build_augmented_momentum(&blocks, ctx.gamma_d)?;
            levels.push(Level { matrix, constrained: blocks.constrained, patches: None });
        }
        levels.push(Level { matrix: ctx.matrix.clone(), constrained: ctx.blocks.constrained.clone(), patches: None });
        for (l, level) in levels.iter_mut().enumerate().skip(1) {
            level.patches = Some(PatchDecomposition::new(self.spaces[l].mesh(), &level.matrix, &level.constrained));
        }
        let coarse_lu = DenseLu::factor(&levels[0].matrix.to_dense())?;
        self.hierarchy = Some(MgHierarchy { levels, prolongations: self.prolongations.clone(), coarse_lu, cfg: self.cfg });
        Ok(())
    }

    fn solve(&mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let h = self.hierarchy.as_ref().ok_or_else(|| Error::InvalidState("multigrid used before rebuild".into()))?;
        let (x, its) = mg_solve(h, rhs)?;
        self.iterations += its;
        self.solves += 1;
        Ok(x)
    }

    fn iterations(&self) -> usize {
        self.iterations
    }

    fn solves(&self) -> usize {
        self.solves
    }
}
