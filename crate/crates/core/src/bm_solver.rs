//! Benson-Munson active-set Newton method for box-constrained mixed
//! complementarity problems.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::norm2;

/// A mixed complementarity problem `a <= z <= b` with residual `f`, solved
/// through linearizations restricted to the inactive set.
pub trait ComplementarityProblem {
    fn lower(&self) -> &[f64];
    fn upper(&self) -> &[f64];
    fn residual(&mut self, z: &[f64]) -> Result<Vec<f64>>;
    /// Newton update with active rows and columns replaced by identity rows
    /// and zero right-hand side entries.
    fn newton_step(&mut self, z: &[f64], f: &[f64], active: &[bool]) -> Result<LinearStats>;
    /// Rescales an update before the linesearch; deflation hooks in here.
    fn transform_step(&mut self, _z: &[f64], dz: Vec<f64>) -> Result<Vec<f64>> {
        Ok(dz)
    }
    /// Positive factor multiplying the residual norm in the linesearch merit.
    fn merit_scale(&self, _z: &[f64]) -> f64 {
        1.0
    }
}

/// A Newton update together with the linear solver effort spent on it.
#[derive(Debug, Clone, Default)]
pub struct LinearStats {
    pub step: Vec<f64>,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub momentum_solves: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BmConfig {
    pub tolerance: f64,
    pub max_iter: usize,
    /// Global factor applied to the linesearch step.
    pub damping: f64,
    pub max_halvings: usize,
    /// Growth of the residual, relative to the first one, treated as
    /// divergence.
    pub divergence_factor: f64,
    /// Steps taken even when the initial residual already meets the
    /// tolerance.
    pub min_iterations: usize,
    /// When nonzero, the solve ends as soon as the smallest residual seen
    /// has not improved for this many iterations, and returns the best
    /// iterate instead of failing. Used to measure roundoff floors.
    pub stagnation_window: usize,
}

impl Default for BmConfig {
    fn default() -> Self {
        Self { tolerance: 1e-5, max_iter: 100, damping: 1.0, max_halvings: 8, divergence_factor: 1e6, min_iterations: 0, stagnation_window: 0 }
    }
}

impl BmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!("damping {} outside (0, 1]", self.damping)));
        }
        if self.min_iterations > self.max_iter {
            return Err(Error::InvalidArgument("min_iterations exceeds max_iter".into()));
        }
        Ok(())
    }
}

/// `i` is active when it sits on its lower bound with `f_i > 0` or on its
/// upper bound with `f_i < 0`.
pub fn classify(z: &[f64], f: &[f64], lower: &[f64], upper: &[f64]) -> Vec<bool> {
    (0..z.len()).map(|i| (z[i] == lower[i] && f[i] > 0.0) || (z[i] == upper[i] && f[i] < 0.0)).collect()
}

/// Residual with the components that push against an attained bound
/// removed.
pub fn projected_residual(z: &[f64], f: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            if z[i] == lower[i] {
                f[i].min(0.0)
            } else if z[i] == upper[i] {
                f[i].max(0.0)
            } else {
                f[i]
            }
        })
        .collect()
}

pub fn projected_residual_norm(z: &[f64], f: &[f64], lower: &[f64], upper: &[f64]) -> f64 {
    norm2(&projected_residual(z, f, lower, upper))
}

/// Componentwise clipping onto `[lower, upper]`.
pub fn project(z: &mut [f64], lower: &[f64], upper: &[f64]) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lower[i], upper[i]);
    }
}

/// Diagnostics of one accepted step.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StepRecord {
    pub residual_norm: f64,
    pub num_active: usize,
    pub step_length: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub momentum_solves: usize,
}

fn merit(problem: &mut dyn ComplementarityProblem, z: &[f64]) -> f64 {
    match problem.residual(z) {
        Ok(f) => problem.merit_scale(z) * projected_residual_norm(z, &f, problem.lower(), problem.upper()),
        Err(_) => f64::INFINITY,
    }
}

/// One Benson-Munson iteration from `z` with residual `f`. Returns the new
/// iterate and the step record.
pub fn bm_step(
    problem: &mut dyn ComplementarityProblem,
    z: &[f64],
    f: &[f64],
    cfg: &BmConfig,
) -> Result<(Vec<f64>, StepRecord)> {
    let active = classify(z, f, problem.lower(), problem.upper());
    let lin = problem.newton_step(z, f, &active)?;
    let dz = problem.transform_step(z, lin.step)?;

    let (lower, upper) = (problem.lower().to_vec(), problem.upper().to_vec());
    let trial = |beta: f64| {
        let mut zt: Vec<f64> = z.iter().zip(&dz).map(|(a, d)| a + beta * d).collect();
        project(&mut zt, &lower, &upper);
        zt
    };
    let mut best = (1.0, f64::INFINITY);
    let mut beta = 1.0;
    for _ in 0..=cfg.max_halvings {
        let zt = trial(beta);
        let m = merit(problem, &zt);
        if m < best.1 {
            best = (beta, m);
        }
        beta *= 0.5;
    }
    let beta = best.0 * cfg.damping;
    let znew = trial(beta);
    let record = StepRecord {
        residual_norm: projected_residual_norm(z, f, &lower, &upper),
        num_active: active.iter().filter(|&&a| a).count(),
        step_length: beta,
        outer_iterations: lin.outer_iterations,
        inner_iterations: lin.inner_iterations,
        momentum_solves: lin.momentum_solves,
    };
    Ok((znew, record))
}

/// Result of a complementarity solve.
#[derive(Debug, Clone, Serialize)]
pub struct McpSolution {
    pub z: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
    pub steps: Vec<StepRecord>,
}

impl McpSolution {
    pub fn outer_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.outer_iterations).sum()
    }

    pub fn inner_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.inner_iterations).sum()
    }

    pub fn momentum_solves(&self) -> usize {
        self.steps.iter().map(|s| s.momentum_solves).sum()
    }
}

/// Failure of a complementarity solve; keeps the effort spent so callers
/// can account for it.
#[derive(Debug, Clone)]
pub struct McpFailure {
    pub error: Error,
    pub z: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

/// Iterates Benson-Munson steps until `|f̂| <= tol`.
pub fn solve_mcp(
    problem: &mut dyn ComplementarityProblem,
    z0: &[f64],
    cfg: &BmConfig,
) -> std::result::Result<McpSolution, McpFailure> {
    let fail = |error: Error, z: Vec<f64>, steps: Vec<StepRecord>| McpFailure { error, z, steps };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, z0.to_vec(), Vec::new()));
    }
    let mut z = z0.to_vec();
    project(&mut z, problem.lower(), problem.upper());
    let mut steps: Vec<StepRecord> = Vec::new();
    let mut first = None;
    // Smallest residual so far, its iterate and its iteration index.
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let stagnating = cfg.stagnation_window > 0;
    let take_best = |best: Option<(f64, Vec<f64>, usize)>, mut steps: Vec<StepRecord>| {
        best.map(|(norm, z, k)| {
            steps.truncate(k);
            McpSolution { z, residual_norm: norm, iterations: k, steps }
        })
    };
    for k in 0..=cfg.max_iter {
        let f = match problem.residual(&z) {
            Ok(f) => f,
            Err(e) => return Err(fail(e, z, steps)),
        };
        let norm = projected_residual_norm(&z, &f, problem.lower(), problem.upper());
        log::debug!("BM iteration {k}: |f̂| = {norm:.3e}");
        if !norm.is_finite() {
            return Err(fail(Error::NonlinearFailure("non-finite residual".into()), z, steps));
        }
        if norm <= cfg.tolerance && k >= cfg.min_iterations {
            return Ok(McpSolution { z, residual_norm: norm, iterations: k, steps });
        }
        if stagnating {
            if best.as_ref().is_none_or(|b| norm < b.0) {
                best = Some((norm, z.clone(), k));
            } else if k - best.as_ref().map_or(0, |b| b.2) >= cfg.stagnation_window {
                return Ok(take_best(best, steps).expect("best iterate recorded"));
            }
        }
        let r0 = *first.get_or_insert(norm);
        if norm > cfg.divergence_factor * r0 {
            let msg = format!("residual grew from {r0:.3e} to {norm:.3e}");
            return Err(fail(Error::NonlinearFailure(msg), z, steps));
        }
        if k == cfg.max_iter {
            break;
        }
        match bm_step(problem, &z, &f, cfg) {
            Ok((znew, rec)) => {
                log::debug!(
                    "  active {} step {:.3e} outer {} inner {}",
                    rec.num_active,
                    rec.step_length,
                    rec.outer_iterations,
                    rec.inner_iterations
                );
                steps.push(rec);
                z = znew;
            }
            Err(e) if stagnating && best.as_ref().is_some_and(|b| b.2 > 0) => {
                log::debug!("stopping at the roundoff floor: {e}");
                return Ok(take_best(best, steps).expect("best iterate recorded"));
            }
            Err(e) => return Err(fail(e, z, steps)),
        }
    }
    if stagnating {
        if let Some(sol) = take_best(best, steps.clone()) {
            return Ok(sol);
        }
    }
    let msg = format!("no convergence in {} iterations", cfg.max_iter);
    Err(fail(Error::NonlinearFailure(msg), z, steps))
}
