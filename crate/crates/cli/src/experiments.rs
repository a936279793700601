//! The experiments behind the subcommands.

use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use flowtopo::assembly::{broken_h1_distance, double_pipe_velocity, ExactVelocity, IterateState, Problem, ProblemConfig};
use flowtopo::bm_solver::BmConfig;
use flowtopo::deflated_barrier::{BarrierConfig, BranchArchive, BranchStatus, DeflatedBarrier, RunStats};
use flowtopo::fem_spaces::VelocityField;
use flowtopo::linalg::{symmetric_eigenvalues, KrylovConfig};
use flowtopo::mesh::{build_rect_mesh, MeshHierarchy, Point};
use flowtopo::multigrid::MultigridSolver;
use flowtopo::preconditioner::{
    build_augmented_momentum, run_newton_krylov, schur_eigen_diagnostic, LuMomentumSolver, MomentumSolver,
};
use serde::Serialize;

use crate::config::{RunConfig, Strategy};

/// Width of the double-pipe domain; the height is 1.
pub const DOUBLE_PIPE_WIDTH: f64 = 1.5;

/// The double-pipe problem on the finest level of its mesh hierarchy.
pub fn build_problem(cfg: &RunConfig) -> Result<(Problem, MeshHierarchy)> {
    let (cx, cy) = cfg.coarse_cells();
    let coarse = build_rect_mesh(DOUBLE_PIPE_WIDTH, 1.0, cx, cy)?;
    let meshes = MeshHierarchy::new(coarse, cfg.levels - 1);
    let problem = Problem::new(meshes.finest().clone(), cfg.problem_config(), Arc::new(double_pipe_velocity), None)?;
    Ok((problem, meshes))
}

pub fn momentum_solver(cfg: &RunConfig, problem: &Problem, meshes: &MeshHierarchy) -> Result<Box<dyn MomentumSolver>> {
    Ok(match cfg.strategy {
        Strategy::AL1 => Box::new(LuMomentumSolver::new()),
        Strategy::AL2 => Box::new(MultigridSolver::new(problem, meshes, cfg.mg_config())?),
    })
}

pub struct DoublePipeRun {
    pub problem: Problem,
    pub archive: BranchArchive,
    pub elapsed: Duration,
}

impl DoublePipeRun {
    pub fn all_converged(&self) -> bool {
        !self.archive.branches.is_empty() && self.archive.branches.iter().all(|b| b.status == BranchStatus::Converged)
    }
}

pub fn run_double_pipe(cfg: &RunConfig) -> Result<DoublePipeRun> {
    cfg.validate()?;
    let (problem, meshes) = build_problem(cfg)?;
    let mut momentum = momentum_solver(cfg, &problem, &meshes)?;
    let start = Instant::now();
    let archive = DeflatedBarrier::new(&problem, cfg.barrier_config(), momentum.as_mut())?.run()?;
    Ok(DoublePipeRun { problem, archive, elapsed: start.elapsed() })
}

/// Coarse shape of a double-pipe design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// Two separate channels, one per inlet/outlet pair.
    StraightChannels,
    /// Both inlets merge into one central channel that splits again.
    DoubleEndedWrench,
    Other,
}

/// Vertical cuts where two separate channels must show, every 0.05 away
/// from the inlets and outlets.
pub fn straight_probe_lines() -> impl Iterator<Item = f64> {
    (3..=27).map(|k| 0.05 * k as f64)
}

/// Vertical cuts through the middle where a wrench has its single bar.
pub fn wrench_probe_lines() -> impl Iterator<Item = f64> {
    (9..=21).map(|k| 0.05 * k as f64)
}

/// `y`-intervals along the vertical line at `x` where `rho > 0.5`, sampled
/// at `samples` evenly spaced points.
pub fn material_bands(problem: &Problem, rho: &[f64], x: f64, samples: usize) -> Vec<(f64, f64)> {
    let mesh = problem.mesh();
    let mut bands = Vec::new();
    let mut open: Option<(f64, f64)> = None;
    for k in 0..samples {
        let y = (k as f64 + 0.5) / samples as f64;
        let solid = mesh.locate([x, y]).is_some_and(|c| rho[c] > 0.5);
        open = match (open, solid) {
            (None, true) => Some((y, y)),
            (Some((a, _)), true) => Some((a, y)),
            (Some(band), false) => {
                bands.push(band);
                None
            }
            (None, false) => None,
        };
    }
    bands.extend(open);
    bands
}

pub fn classify_topology(problem: &Problem, rho: &[f64]) -> Topology {
    let bands = |x: f64| material_bands(problem, rho, x, 400);
    let straight = straight_probe_lines().map(bands).all(|b| b.len() == 2 && b[0].1 < 0.5 && b[1].0 > 0.5);
    if straight {
        return Topology::StraightChannels;
    }
    let wrench = wrench_probe_lines().map(bands).all(|b| b.len() == 1 && b[0].0 < 0.5 && b[0].1 > 0.5);
    if wrench {
        Topology::DoubleEndedWrench
    } else {
        Topology::Other
    }
}

/// Per-branch summary written to the manifest.
#[derive(Debug, Clone, Serialize)]
pub struct BranchSummary {
    pub id: usize,
    pub status: BranchStatus,
    pub found_at_mu: f64,
    pub mu: f64,
    pub objective: f64,
    pub divergence_norm: f64,
    pub topology: Topology,
}

pub fn summarize(problem: &Problem, archive: &BranchArchive) -> Vec<BranchSummary> {
    archive
        .branches
        .iter()
        .map(|b| BranchSummary {
            id: b.id,
            status: b.status,
            found_at_mu: b.found_at_mu,
            mu: b.mu,
            objective: problem.objective(&b.state),
            divergence_norm: problem.divergence_norm(&b.state.u),
            topology: classify_topology(problem, &b.state.rho),
        })
        .collect()
}

/// One column set of the gamma sweep.
#[derive(Debug, Clone, Serialize)]
pub struct GammaSweepRow {
    pub gamma_d: f64,
    pub avg_outer_mu105: f64,
    pub residual_mu105: f64,
    pub avg_outer_mu1: f64,
    pub residual_mu1: f64,
    /// Inner iterations per momentum solve in the first outer iteration at
    /// the first subproblem; multigrid only.
    pub avg_inner: Option<f64>,
}

/// Parameters of the stagnation solves.
pub const SWEEP_OUTER_ATOL: f64 = 1e-15;
pub const SWEEP_OUTER_RTOL: f64 = 1e-5;
pub const SWEEP_STAGNATION_WINDOW: usize = 3;
pub const SWEEP_MU: [f64; 2] = [105.0, 1.0];

/// Starting points for the sweep's subproblems on the first branch: the
/// initial state, and the continuation state just above the lower `mu`,
/// reached with a direct momentum solver. A failed step is retried halfway.
pub fn sweep_guesses(cfg: &RunConfig, problem: &Problem) -> Result<[IterateState; 2]> {
    let [mu_high, mu_low] = SWEEP_MU;
    let mut momentum = LuMomentumSolver::new();
    let mut barrier = BarrierConfig { max_branches: 1, ..cfg.barrier_config() };
    barrier.precond.strategy = Strategy::AL1.momentum();
    let schedule = barrier.schedule;
    let mut solver = DeflatedBarrier::new(problem, barrier, &mut momentum)?;
    let start = problem.initial_state()?;
    let mut stats = RunStats::default();
    let solve = |solver: &mut DeflatedBarrier, guess: &IterateState, mu: f64, stats: &mut RunStats| {
        solver
            .solve_subproblem(guess, mu, &[], stats)
            .map(|sol| IterateState::from_slice(&sol.z, problem.n_rho(), problem.n_u(), problem.n_p()))
    };
    let mut state = solve(&mut solver, &start, mu_high, &mut stats)
        .map_err(|f| f.error)
        .context("the first sweep subproblem failed")?;
    // Stop at the last schedule point above `mu_low`, so that the sweep
    // still has a genuine solve to do there.
    let mut mu = mu_high;
    while mu * schedule.theta > mu_low {
        let mut target = mu * schedule.theta;
        let mut halvings = 0;
        state = loop {
            match solve(&mut solver, &state, target, &mut stats) {
                Ok(next) => break next,
                Err(f) if halvings == schedule.max_halvings => {
                    return Err(f.error).with_context(|| format!("continuation stalled at mu = {target}"));
                }
                Err(_) => {
                    halvings += 1;
                    target = 0.5 * (mu + target);
                }
            }
        };
        mu = target;
    }
    Ok([start, state])
}

/// Roundoff floors with a direct momentum solver; multigrid inner counts
/// as well when the strategy is aL2.
pub fn gamma_sweep(cfg: &RunConfig, gammas: &[f64]) -> Result<Vec<GammaSweepRow>> {
    cfg.validate()?;
    let (problem, meshes) = build_problem(cfg)?;
    let guesses = sweep_guesses(cfg, &problem)?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma_d in gammas {
        let run_cfg = RunConfig { gamma_d, ..cfg.clone() };
        let mut barrier = run_cfg.barrier_config();
        barrier.precond.strategy = Strategy::AL1.momentum();
        barrier.outer_atol = SWEEP_OUTER_ATOL;
        barrier.outer_rtol = SWEEP_OUTER_RTOL;
        barrier.outer_max_iter = 1000;
        barrier.bm = BmConfig {
            tolerance: f64::MIN_POSITIVE,
            max_iter: 60,
            stagnation_window: SWEEP_STAGNATION_WINDOW,
            ..barrier.bm
        };
        let mut stats = [(0.0, 0.0); 2];
        for (slot, (&mu, guess)) in stats.iter_mut().zip(SWEEP_MU.iter().zip(&guesses)) {
            let mut momentum = LuMomentumSolver::new();
            let mut solver = DeflatedBarrier::new(&problem, barrier, &mut momentum)?;
            let sol = solver
                .solve_subproblem(guess, mu, &[], &mut RunStats::default())
                .map_err(|f| f.error)
                .with_context(|| format!("stagnation solve at gamma_d = {gamma_d}, mu = {mu}"))?;
            *slot = (sol.outer_iterations() as f64 / sol.iterations.max(1) as f64, sol.residual_norm);
        }
        let avg_inner = match cfg.strategy {
            Strategy::AL1 => None,
            Strategy::AL2 => Some(first_outer_inner_average(&run_cfg, &problem, &meshes, &guesses[0], SWEEP_MU[0])?),
        };
        log::info!("gamma_d = {gamma_d:e}: {stats:?} inner {avg_inner:?}");
        rows.push(GammaSweepRow {
            gamma_d,
            avg_outer_mu105: stats[0].0,
            residual_mu105: stats[0].1,
            avg_outer_mu1: stats[1].0,
            residual_mu1: stats[1].1,
            avg_inner,
        });
    }
    Ok(rows)
}

/// Average inner iterations per momentum solve during the first outer
/// Krylov iteration of the first Newton step at `mu` from `state`.
pub fn first_outer_inner_average(
    cfg: &RunConfig,
    problem: &Problem,
    meshes: &MeshHierarchy,
    state: &IterateState,
    mu: f64,
) -> Result<f64> {
    let mut momentum = momentum_solver(cfg, problem, meshes)?;
    let f = problem.residual(state, mu)?.to_vec();
    let active = vec![false; problem.n_rho()];
    let outer = KrylovConfig::new(SWEEP_OUTER_ATOL, SWEEP_OUTER_RTOL, 1)?;
    let report =
        run_newton_krylov(problem, state, mu, &active, &f, &cfg.precond_config(), &outer, momentum.as_mut())?;
    Ok(report.inner_iterations as f64 / report.momentum_solves.max(1) as f64)
}

/// Spectrum summary of `gamma_d M_p^{-1} S_2` for one `gamma_d`.
#[derive(Debug, Clone, Serialize)]
pub struct SchurRow {
    pub gamma_d: f64,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `max |lambda + 1|`.
    pub deviation: f64,
    pub negative: usize,
    pub count: usize,
    /// Whether the augmented momentum block has only positive eigenvalues.
    pub momentum_spd: bool,
}

/// Tiny-mesh Newton blocks used by the diagnostic: full material, no flow.
pub fn schur_problem(nx: usize, ny: usize, config: ProblemConfig) -> Result<(Problem, IterateState)> {
    let problem = Problem::double_pipe(nx, ny, config)?;
    let state = IterateState {
        rho: vec![1.0; problem.n_rho()],
        u: vec![0.0; problem.n_u()],
        p: vec![0.0; problem.n_p()],
        lambda: 0.0,
    };
    Ok((problem, state))
}

pub fn schur_diagnostic(cfg: &RunConfig, gammas: &[f64]) -> Result<Vec<SchurRow>> {
    let (problem, state) = schur_problem(cfg.nx.min(4), cfg.ny.min(4), cfg.problem_config())?;
    let blocks = problem.jacobian(&state, 1.0, &vec![false; problem.n_rho()])?;
    gammas
        .iter()
        .map(|&gamma_d| {
            let eig = schur_eigen_diagnostic(&blocks, gamma_d)?;
            let momentum = build_augmented_momentum(&blocks, gamma_d)?;
            let spd = symmetric_eigenvalues(&momentum.to_dense()).iter().all(|&l| l > 0.0);
            Ok(SchurRow {
                gamma_d,
                min_eigenvalue: eig.iter().copied().fold(f64::INFINITY, f64::min),
                max_eigenvalue: eig.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                deviation: eig.iter().map(|l| (l + 1.0).abs()).fold(0.0, f64::max),
                negative: eig.iter().filter(|&&l| l < 0.0).count(),
                count: eig.len(),
                momentum_spd: spd,
            })
        })
        .collect()
}

/// Error of the discrete Stokes velocity against a smooth exact solution.
#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    pub error: f64,
    /// Error on the previous mesh divided by this one.
    pub ratio: Option<f64>,
}

fn exact_velocity(x: Point) -> [f64; 2] {
    use std::f64::consts::PI;
    [(PI * x[0]).sin() * (PI * x[1]).cos(), -(PI * x[0]).cos() * (PI * x[1]).sin()]
}

fn exact_gradient(x: Point) -> [[f64; 2]; 2] {
    use std::f64::consts::PI;
    let (s0, c0, s1, c1) = ((PI * x[0]).sin(), (PI * x[0]).cos(), (PI * x[1]).sin(), (PI * x[1]).cos());
    [[PI * c0 * c1, -PI * s0 * s1], [PI * s0 * s1, -PI * c0 * c1]]
}

/// Stokes flow on the unit square with full material, so the Brinkman
/// term vanishes. The exact velocity is a cellular flow with zero pressure.
pub fn convergence_study(config: ProblemConfig, sizes: &[usize]) -> Result<Vec<ConvergenceRow>> {
    let nu = config.viscosity;
    let g: VelocityField = Arc::new(exact_velocity);
    let force: VelocityField = Arc::new(move |x| {
        let u = exact_velocity(x);
        let k = 2.0 * nu * std::f64::consts::PI.powi(2);
        [k * u[0], k * u[1]]
    });
    let exact = ExactVelocity { value: &exact_velocity, gradient: &exact_gradient };
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mesh = Arc::new(build_rect_mesh(1.0, 1.0, n, n)?);
        let problem = Problem::new(mesh, config, g.clone(), Some(force.clone()))?;
        let (u, _) = problem.solve_stokes_brinkman(&vec![1.0; problem.n_rho()])?;
        let error = broken_h1_distance(problem.velocity_space(), &u, Some(&exact), &exact_velocity);
        let ratio = rows.last().map(|r| r.error / error);
        rows.push(ConvergenceRow { n, h: 1.0 / n as f64, error, ratio });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn painted(problem: &Problem, solid: impl Fn(Point) -> bool) -> Vec<f64> {
        let mesh = problem.mesh();
        (0..mesh.num_cells()).map(|c| if solid(mesh.centroid(c)) { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn classifier_recognizes_painted_shapes() {
        let p = Problem::double_pipe(30, 24, ProblemConfig::default()).unwrap();
        let straight = painted(&p, |x| (x[1] - 0.25).abs() < 0.1 || (x[1] - 0.75).abs() < 0.1);
        assert_eq!(classify_topology(&p, &straight), Topology::StraightChannels);
        let wrench = painted(&p, |x| {
            let arms = (x[0] < 0.3 || x[0] > 1.2) && ((x[1] - 0.25).abs() < 0.1 || (x[1] - 0.75).abs() < 0.1);
            let bar = (0.2..1.3).contains(&x[0]) && (x[1] - 0.5).abs() < 0.2;
            arms || bar
        });
        assert_eq!(classify_topology(&p, &wrench), Topology::DoubleEndedWrench);
        let mut hybrid = straight.clone();
        for (c, r) in hybrid.iter_mut().enumerate() {
            let x = p.mesh().centroid(c);
            if (x[0] - 0.62).abs() < 0.05 && (0.25..0.75).contains(&x[1]) {
                *r = 1.0;
            }
        }
        assert_eq!(classify_topology(&p, &hybrid), Topology::Other);
        assert_eq!(classify_topology(&p, &vec![0.0; p.n_rho()]), Topology::Other);
        assert_eq!(classify_topology(&p, &vec![1.0; p.n_rho()]), Topology::DoubleEndedWrench);
    }

    #[test]
    fn bands_are_sorted_and_disjoint() {
        let p = Problem::double_pipe(30, 24, ProblemConfig::default()).unwrap();
        let rho = painted(&p, |x| (x[1] * 5.0).floor() as i32 % 2 == 0);
        let bands = material_bands(&p, &rho, 0.7, 200);
        assert_eq!(bands.len(), 3);
        assert!(bands.windows(2).all(|w| w[0].1 < w[1].0));
    }

    #[test]
    fn manufactured_force_matches_the_exact_solution() {
        // -nu lap u = 2 nu pi^2 u for the cellular flow; check by differences.
        let h = 1e-4;
        let x = [0.31, 0.67];
        for comp in 0..2 {
            let f = |p: Point| exact_velocity(p)[comp];
            let lap = (f([x[0] + h, x[1]]) + f([x[0] - h, x[1]]) + f([x[0], x[1] + h]) + f([x[0], x[1] - h])
                - 4.0 * f(x))
                / (h * h);
            let want = -2.0 * std::f64::consts::PI.powi(2) * f(x);
            assert!((lap - want).abs() < 1e-5 * want.abs().max(1.0));
        }
        let g = exact_gradient(x);
        assert!((g[0][0] + g[1][1]).abs() < 1e-14);
    }

    #[test]
    fn schur_rows_cover_the_zero_column() {
        let cfg = RunConfig { nx: 2, ny: 2, ..Default::default() };
        let rows = schur_diagnostic(&cfg, &[0.0, 1e2]).unwrap();
        assert!(rows[0].max_eigenvalue < 0.0);
        assert_eq!(rows[0].negative, rows[0].count);
        assert!(rows.iter().all(|r| r.momentum_spd));
        assert!(rows[1].min_eigenvalue > -1.0);
    }
}
