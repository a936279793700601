//! Deflated barrier continuation: follow branches of barrier subproblem
//! solutions as `mu -> 0`, discovering new branches by deflation.

use serde::{Deserialize, Serialize};

use crate::assembly::{IterateState, Problem};
use crate::bm_solver::{solve_mcp, BmConfig, ComplementarityProblem, LinearStats, McpFailure, McpSolution};
use crate::error::{Error, Result};
use crate::linalg::KrylovConfig;
use crate::preconditioner::{augment_residual, solve_newton_system, BlockPrecondConfig, MomentumSolver};

/// Shifted deflation with power 2 and shift 1 against known material
/// fields, measured in the cell-area weighted `L^2` norm.
#[derive(Debug, Clone)]
pub struct DeflationOperator {
    weights: Vec<f64>,
    known: Vec<Vec<f64>>,
}

impl DeflationOperator {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights, known: Vec::new() }
    }

    pub fn push(&mut self, rho: Vec<f64>) {
        assert_eq!(rho.len(), self.weights.len());
        self.known.push(rho);
    }

    pub fn len(&self) -> usize {
        self.known.len()
    }

    pub fn is_empty(&self) -> bool {
        self.known.is_empty()
    }

    fn distance_squared(&self, rho: &[f64], j: usize) -> f64 {
        self.known[j].iter().zip(rho).zip(&self.weights).map(|((a, b), w)| w * (a - b) * (a - b)).sum()
    }

    /// `prod_j (1 / |rho - rho_j|^2 + 1)`.
    pub fn factor(&self, rho: &[f64]) -> f64 {
        (0..self.known.len()).map(|j| 1.0 / self.distance_squared(rho, j) + 1.0).product()
    }

    /// Scaling `tau` of the undeflated update `d_rho` (material part) that
    /// yields the Newton update of the deflated residual.
    pub fn step_scale(&self, rho: &[f64], d_rho: &[f64]) -> Result<f64> {
        let mut g_dot_d = 0.0;
        for j in 0..self.known.len() {
            let d2 = self.distance_squared(rho, j);
            if !(d2 > 0.0) {
                return Err(Error::DeflationBreakdown(0.0));
            }
            let m = 1.0 / d2 + 1.0;
            let grad_dot: f64 =
                (0..rho.len()).map(|i| -2.0 * self.weights[i] * (rho[i] - self.known[j][i]) * d_rho[i]).sum::<f64>()
                    / (d2 * d2);
            g_dot_d += grad_dot / m;
        }
        let denom = 1.0 - g_dot_d;
        if denom.abs() <= 1e-12 {
            return Err(Error::DeflationBreakdown(denom));
        }
        Ok(1.0 / denom)
    }
}

/// Scales the full update `dz`, whose first `rho.len()` entries are the
/// material part, by the deflation factor.
pub fn deflation_scale(dz: &[f64], rho: &[f64], op: &DeflationOperator) -> Result<Vec<f64>> {
    let tau = op.step_scale(rho, &dz[..rho.len()])?;
    Ok(dz.iter().map(|d| tau * d).collect())
}

/// `J_mu = J - mu int log(rho + eps) + log(1 + eps - rho)`.
pub fn barrier_objective(problem: &Problem, state: &IterateState, mu: f64) -> f64 {
    let eps = problem.config().eps_log;
    let barrier: f64 = state
        .rho
        .iter()
        .zip(&problem.mesh().areas)
        .map(|(r, a)| a * ((r + eps).ln() + (1.0 + eps - r).ln()))
        .sum();
    problem.objective(state) - mu * barrier
}

/// Geometric barrier schedule `mu_{k+1} = theta mu_k`, jumping to zero once
/// below the floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuationSchedule {
    pub mu0: f64,
    pub theta: f64,
    pub mu_floor: f64,
    /// Step halvings allowed per failed subproblem.
    pub max_halvings: usize,
}

impl Default for ContinuationSchedule {
    fn default() -> Self {
        Self { mu0: 105.0, theta: 0.5, mu_floor: 1e-8, max_halvings: 10 }
    }
}

impl ContinuationSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu0 > 0.0 && self.theta > 0.0 && self.theta < 1.0 && self.mu_floor > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid continuation schedule {self:?}")));
        }
        Ok(())
    }

    /// Next barrier parameter after `mu`, or `None` once zero is reached.
    pub fn next(&self, mu: f64) -> Option<f64> {
        if mu == 0.0 {
            return None;
        }
        let m = self.theta * mu;
        Some(if m < self.mu_floor { 0.0 } else { m })
    }

    /// The full sequence without failures, ending in zero.
    pub fn sequence(&self) -> Vec<f64> {
        let mut out = vec![self.mu0];
        while let Some(m) = self.next(*out.last().expect("non-empty")) {
            out.push(m);
        }
        out
    }
}

/// Solver settings of a deflated barrier run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    pub schedule: ContinuationSchedule,
    pub bm: BmConfig,
    pub precond: BlockPrecondConfig,
    pub outer_atol: f64,
    pub outer_rtol: f64,
    pub outer_max_iter: usize,
    /// Nonlinear and outer Krylov tolerances for the terminal `mu = 0`
    /// subproblem.
    pub final_tolerance: f64,
    pub final_outer_atol: f64,
    pub final_outer_rtol: f64,
    pub max_branches: usize,
    /// Minimum material distance between distinct branches.
    pub separation: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self {
            schedule: ContinuationSchedule::default(),
            bm: BmConfig::default(),
            precond: BlockPrecondConfig::default(),
            outer_atol: 1e-7,
            outer_rtol: 1e-7,
            outer_max_iter: 500,
            final_tolerance: 1e-6,
            final_outer_atol: 1e-12,
            final_outer_rtol: 1e-12,
            max_branches: 2,
            separation: 1e-3,
        }
    }
}

impl BarrierConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.bm.validate()?;
        self.precond.validate()?;
        KrylovConfig::new(self.outer_atol, self.outer_rtol, self.outer_max_iter)?;
        KrylovConfig::new(self.final_outer_atol, self.final_outer_rtol, self.outer_max_iter)?;
        if !(self.final_tolerance > 0.0) {
            return Err(Error::InvalidArgument("final_tolerance must be positive".into()));
        }
        if self.max_branches == 0 {
            return Err(Error::InvalidArgument("max_branches must be at least 1".into()));
        }
        Ok(())
    }

    fn outer(&self, mu: f64) -> KrylovConfig {
        let (atol, rtol) =
            if mu == 0.0 { (self.final_outer_atol, self.final_outer_rtol) } else { (self.outer_atol, self.outer_rtol) };
        KrylovConfig::new(atol, rtol, self.outer_max_iter).expect("validated tolerances")
    }
}

/// The barrier subproblem at fixed `mu` as a complementarity problem on
/// `z = (rho, u, p, lambda)`.
pub struct BarrierSubproblem<'a> {
    problem: &'a Problem,
    mu: f64,
    precond: BlockPrecondConfig,
    outer: KrylovConfig,
    momentum: &'a mut dyn MomentumSolver,
    deflation: &'a DeflationOperator,
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl<'a> BarrierSubproblem<'a> {
    pub fn new(
        problem: &'a Problem,
        mu: f64,
        precond: BlockPrecondConfig,
        outer: KrylovConfig,
        momentum: &'a mut dyn MomentumSolver,
        deflation: &'a DeflationOperator,
    ) -> Self {
        let (nr, n) = (problem.n_rho(), problem.dim());
        let mut lower = vec![f64::NEG_INFINITY; n];
        let mut upper = vec![f64::INFINITY; n];
        lower[..nr].iter_mut().for_each(|v| *v = 0.0);
        upper[..nr].iter_mut().for_each(|v| *v = 1.0);
        Self { problem, mu, precond, outer, momentum, deflation, lower, upper }
    }

    fn state(&self, z: &[f64]) -> IterateState {
        IterateState::from_slice(z, self.problem.n_rho(), self.problem.n_u(), self.problem.n_p())
    }
}

impl ComplementarityProblem for BarrierSubproblem<'_> {
    fn lower(&self) -> &[f64] {
        &self.lower
    }

    fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// The augmented residual, so that the termination test sees the same
    /// quantity the outer Krylov tolerance controls.
    fn residual(&mut self, z: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.problem.residual(&self.state(z), self.mu)?.to_vec();
        augment_residual(self.problem, self.precond.gamma_d, &mut f);
        Ok(f)
    }

    fn newton_step(&mut self, z: &[f64], _f: &[f64], active: &[bool]) -> Result<LinearStats> {
        let state = self.state(z);
        let nr = self.problem.n_rho();
        // The linear solve augments the plain residual itself.
        let f = self.problem.residual(&state, self.mu)?.to_vec();
        let report = solve_newton_system(
            self.problem,
            &state,
            self.mu,
            &active[..nr],
            &f,
            &self.precond,
            &self.outer,
            &mut *self.momentum,
        )?;
        Ok(LinearStats {
            step: report.step,
            outer_iterations: report.outer_iterations,
            inner_iterations: report.inner_iterations,
            momentum_solves: report.momentum_solves,
        })
    }

    fn transform_step(&mut self, z: &[f64], dz: Vec<f64>) -> Result<Vec<f64>> {
        if self.deflation.is_empty() {
            return Ok(dz);
        }
        deflation_scale(&dz, &z[..self.problem.n_rho()], self.deflation)
    }

    fn merit_scale(&self, z: &[f64]) -> f64 {
        self.deflation.factor(&z[..self.problem.n_rho()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Live,
    Converged,
    Failed,
}

/// A converged subproblem on one branch.
#[derive(Debug, Clone, Serialize)]
pub struct BranchEvent {
    pub mu: f64,
    pub objective: f64,
    pub barrier_objective: f64,
    pub residual: f64,
    pub bm_iterations: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub momentum_solves: usize,
}

#[derive(Debug, Clone)]
pub struct Branch {
    pub id: usize,
    pub state: IterateState,
    pub mu: f64,
    pub found_at_mu: f64,
    pub status: BranchStatus,
    pub history: Vec<BranchEvent>,
}

/// Cumulative solver effort, failed attempts included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub bm_iterations: usize,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub momentum_solves: usize,
    pub failed_solves: usize,
    pub mu_halvings: usize,
}

impl RunStats {
    fn add_steps(&mut self, steps: &[crate::bm_solver::StepRecord]) {
        self.bm_iterations += steps.len();
        self.outer_iterations += steps.iter().map(|s| s.outer_iterations).sum::<usize>();
        self.inner_iterations += steps.iter().map(|s| s.inner_iterations).sum::<usize>();
        self.momentum_solves += steps.iter().map(|s| s.momentum_solves).sum::<usize>();
    }

    /// Outer Krylov iterations per BM iteration.
    pub fn average_outer(&self) -> f64 {
        self.outer_iterations as f64 / self.bm_iterations.max(1) as f64
    }

    /// Inner Krylov iterations per momentum solve.
    pub fn average_inner(&self) -> f64 {
        self.inner_iterations as f64 / self.momentum_solves.max(1) as f64
    }
}

#[derive(Debug, Clone, Default)]
pub struct BranchArchive {
    pub branches: Vec<Branch>,
    pub stats: RunStats,
}

impl BranchArchive {
    pub fn converged(&self) -> impl Iterator<Item = &Branch> {
        self.branches.iter().filter(|b| b.status == BranchStatus::Converged)
    }

    fn live_indices(&self) -> Vec<usize> {
        (0..self.branches.len()).filter(|&i| self.branches[i].status == BranchStatus::Live).collect()
    }
}

/// Drives the deflated barrier method with one reusable momentum solver.
pub struct DeflatedBarrier<'a> {
    problem: &'a Problem,
    cfg: BarrierConfig,
    momentum: &'a mut dyn MomentumSolver,
}

impl<'a> DeflatedBarrier<'a> {
    pub fn new(problem: &'a Problem, cfg: BarrierConfig, momentum: &'a mut dyn MomentumSolver) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { problem, cfg, momentum })
    }

    /// One complementarity solve at `mu` from `guess`, deflating `known`.
    pub fn solve_subproblem(
        &mut self,
        guess: &IterateState,
        mu: f64,
        known: &[&IterateState],
        stats: &mut RunStats,
    ) -> std::result::Result<McpSolution, McpFailure> {
        let mut deflation = DeflationOperator::new(self.problem.mesh().areas.clone());
        for k in known {
            deflation.push(k.rho.clone());
        }
        let outer = self.cfg.outer(mu);
        // The terminal solve always takes a step so the tight outer tolerance
        // reaches the incompressibility rows.
        let mut bm = if mu == 0.0 {
            BmConfig { tolerance: self.cfg.final_tolerance, min_iterations: 1, ..self.cfg.bm }
        } else {
            self.cfg.bm
        };
        // A deflated solve must not accept its start unexamined: the start may
        // be a known root, where only a step exposes the deflation breakdown.
        if !deflation.is_empty() {
            bm.min_iterations = bm.min_iterations.max(1);
        }
        let mut sub = BarrierSubproblem::new(self.problem, mu, self.cfg.precond, outer, &mut *self.momentum, &deflation);
        let result = solve_mcp(&mut sub, &guess.to_vec(), &bm);
        match &result {
            Ok(sol) => stats.add_steps(&sol.steps),
            Err(fail) => {
                stats.add_steps(&fail.steps);
                stats.failed_solves += 1;
                log::info!("subproblem at mu = {mu:.4e} failed: {}", fail.error);
            }
        }
        result
    }

    fn event(&self, state: &IterateState, mu: f64, sol: &McpSolution) -> BranchEvent {
        BranchEvent {
            mu,
            objective: self.problem.objective(state),
            barrier_objective: barrier_objective(self.problem, state, mu),
            residual: sol.residual_norm,
            bm_iterations: sol.iterations,
            outer_iterations: sol.outer_iterations(),
            inner_iterations: sol.inner_iterations(),
            momentum_solves: sol.momentum_solves(),
        }
    }

    fn to_state(&self, z: &[f64]) -> IterateState {
        IterateState::from_slice(z, self.problem.n_rho(), self.problem.n_u(), self.problem.n_p())
    }

    fn separated(&self, rho: &[f64], others: &[&IterateState]) -> bool {
        others.iter().all(|o| self.problem.material_distance_squared(rho, &o.rho).sqrt() > self.cfg.separation)
    }

    /// Searches for new branches at `mu` from `guesses`, deflating every
    /// solution known at `mu`. Stops at the first failure or at the branch
    /// cap.
    fn deflation_step(&mut self, archive: &mut BranchArchive, guesses: &[IterateState], mu: f64) {
        for guess in guesses {
            loop {
                if archive.branches.len() >= self.cfg.max_branches {
                    return;
                }
                let known: Vec<IterateState> = archive
                    .branches
                    .iter()
                    .filter(|b| b.status != BranchStatus::Failed && b.mu == mu)
                    .map(|b| b.state.clone())
                    .collect();
                let known_refs: Vec<&IterateState> = known.iter().collect();
                let mut stats = archive.stats;
                let result = self.solve_subproblem(guess, mu, &known_refs, &mut stats);
                archive.stats = stats;
                let Ok(sol) = result else { return };
                let state = self.to_state(&sol.z);
                if !self.separated(&state.rho, &known_refs) {
                    log::info!("deflation at mu = {mu:.4e} returned a known solution");
                    return;
                }
                let id = archive.branches.len();
                log::info!("branch {id} found at mu = {mu:.4e}");
                let event = self.event(&state, mu, &sol);
                let status = if mu == 0.0 { BranchStatus::Converged } else { BranchStatus::Live };
                archive.branches.push(Branch { id, state, mu, found_at_mu: mu, status, history: vec![event] });
            }
        }
    }

    /// Continues every live branch from `mu` to `target`, halving the step on
    /// failure. Returns the barrier parameter actually reached.
    fn continuation_step(&mut self, archive: &mut BranchArchive, mu: f64, mut target: f64) -> Option<f64> {
        let live = archive.live_indices();
        let mut halvings = 0;
        'retry: loop {
            let mut solved: Vec<(usize, IterateState, BranchEvent)> = Vec::new();
            for &i in &live {
                let known: Vec<IterateState> = solved.iter().map(|(_, s, _)| s.clone()).collect();
                let known_refs: Vec<&IterateState> = known.iter().collect();
                let guess = archive.branches[i].state.clone();
                let mut stats = archive.stats;
                let result = self.solve_subproblem(&guess, target, &known_refs, &mut stats);
                archive.stats = stats;
                match result {
                    Ok(sol) => {
                        let state = self.to_state(&sol.z);
                        let event = self.event(&state, target, &sol);
                        solved.push((i, state, event));
                    }
                    Err(_) if halvings < self.cfg.schedule.max_halvings => {
                        halvings += 1;
                        archive.stats.mu_halvings += 1;
                        target = 0.5 * (mu + target);
                        log::info!("halving the barrier step: retrying at mu = {target:.4e}");
                        continue 'retry;
                    }
                    Err(_) => {
                        log::warn!("branch {i} failed at mu = {target:.4e}");
                        archive.branches[i].status = BranchStatus::Failed;
                    }
                }
            }
            for (i, state, event) in solved {
                let b = &mut archive.branches[i];
                b.state = state;
                b.mu = target;
                b.history.push(event);
                if target == 0.0 {
                    b.status = BranchStatus::Converged;
                }
            }
            return (!archive.live_indices().is_empty() || target == 0.0).then_some(target);
        }
    }

    /// Runs the method from the problem's default initial state.
    pub fn run(&mut self) -> Result<BranchArchive> {
        let init = self.problem.initial_state()?;
        self.run_from(init)
    }

    pub fn run_from(&mut self, init: IterateState) -> Result<BranchArchive> {
        let mut archive = BranchArchive::default();
        let mut mu = self.cfg.schedule.mu0;
        self.deflation_step(&mut archive, std::slice::from_ref(&init), mu);
        if archive.branches.is_empty() {
            return Err(Error::NonlinearFailure(format!("no solution found at mu = {mu}")));
        }
        while let Some(next) = self.cfg.schedule.next(mu) {
            if archive.live_indices().is_empty() {
                break;
            }
            let previous: Vec<IterateState> =
                archive.live_indices().iter().map(|&i| archive.branches[i].state.clone()).collect();
            let Some(reached) = self.continuation_step(&mut archive, mu, next) else { break };
            mu = reached;
            self.deflation_step(&mut archive, &previous, mu);
        }
        if archive.converged().next().is_none() {
            return Err(Error::NonlinearFailure("every branch failed before reaching mu = 0".into()));
        }
        Ok(archive)
    }
}
