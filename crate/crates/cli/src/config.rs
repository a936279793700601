//! Run configuration: a flat TOML table plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use flowtopo::assembly::ProblemConfig;
use flowtopo::deflated_barrier::{BarrierConfig, ContinuationSchedule};
use flowtopo::multigrid::{CycleType, MgConfig};
use flowtopo::preconditioner::{BlockPrecondConfig, MomentumStrategy};
use serde::{Deserialize, Serialize};

/// How the augmented momentum block is inverted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
pub enum Strategy {
    /// Sparse LU.
    #[serde(rename = "aL1")]
    #[value(name = "aL1")]
    AL1,
    /// FGMRES with a full multigrid cycle.
    #[serde(rename = "aL2")]
    #[value(name = "aL2")]
    AL2,
}

impl Strategy {
    pub fn momentum(self) -> MomentumStrategy {
        match self {
            Strategy::AL1 => MomentumStrategy::Lu,
            Strategy::AL2 => MomentumStrategy::Multigrid,
        }
    }
}

pub const DOUBLE_PIPE: &str = "double-pipe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    /// Cells per direction on the finest mesh.
    pub nx: usize,
    pub ny: usize,
    /// Number of mesh levels; the finest is `nx x ny`.
    pub levels: usize,
    pub viscosity: f64,
    pub alpha_max: f64,
    pub q: f64,
    pub volume_fraction: f64,
    pub penalty: f64,
    pub eps_log: f64,
    pub strategy: Strategy,
    pub gamma_d: f64,
    pub tolerance: f64,
    pub outer_atol: f64,
    pub outer_rtol: f64,
    pub inner_atol: f64,
    pub inner_rtol: f64,
    pub mu0: f64,
    pub theta: f64,
    pub max_branches: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let problem = ProblemConfig::default();
        let barrier = BarrierConfig::default();
        Self {
            problem: DOUBLE_PIPE.into(),
            nx: 42,
            ny: 28,
            levels: 1,
            viscosity: problem.viscosity,
            alpha_max: problem.alpha_max,
            q: problem.q,
            volume_fraction: problem.volume_fraction,
            penalty: problem.penalty,
            eps_log: problem.eps_log,
            strategy: Strategy::AL1,
            gamma_d: barrier.precond.gamma_d,
            tolerance: barrier.bm.tolerance,
            outer_atol: barrier.outer_atol,
            outer_rtol: barrier.outer_rtol,
            inner_atol: barrier.precond.inner_atol,
            inner_rtol: barrier.precond.inner_rtol,
            mu0: barrier.schedule.mu0,
            theta: barrier.schedule.theta,
            max_branches: barrier.max_branches,
            out: PathBuf::from("output"),
        }
    }
}

/// Values given on the command line take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategy: Option<Strategy>,
    pub gamma_d: Option<f64>,
    pub mu0: Option<f64>,
    pub max_branches: Option<usize>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("malformed run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(g) = o.gamma_d {
            self.gamma_d = g;
        }
        if let Some(m) = o.mu0 {
            self.mu0 = m;
        }
        if let Some(b) = o.max_branches {
            self.max_branches = b;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.problem != DOUBLE_PIPE {
            bail!("unknown problem {:?}; expected {DOUBLE_PIPE:?}", self.problem);
        }
        if self.nx == 0 || self.ny == 0 || self.levels == 0 {
            bail!("resolutions and the level count must be positive");
        }
        if self.strategy == Strategy::AL2 && self.levels < 2 {
            bail!("strategy aL2 needs at least 2 mesh levels, got {}", self.levels);
        }
        let coarsest = 1usize << (self.levels - 1);
        if self.nx % coarsest != 0 || self.ny % coarsest != 0 {
            bail!("{}x{} cannot be coarsened {} times", self.nx, self.ny, self.levels - 1);
        }
        self.problem_config().validate()?;
        self.barrier_config().validate()?;
        if self.strategy == Strategy::AL2 {
            self.mg_config().validate()?;
        }
        Ok(())
    }

    pub fn problem_config(&self) -> ProblemConfig {
        ProblemConfig {
            viscosity: self.viscosity,
            alpha_max: self.alpha_max,
            q: self.q,
            volume_fraction: self.volume_fraction,
            penalty: self.penalty,
            eps_log: self.eps_log,
        }
    }

    pub fn precond_config(&self) -> BlockPrecondConfig {
        BlockPrecondConfig {
            gamma_d: self.gamma_d,
            strategy: self.strategy.momentum(),
            inner_atol: self.inner_atol,
            inner_rtol: self.inner_rtol,
        }
    }

    pub fn barrier_config(&self) -> BarrierConfig {
        let base = BarrierConfig::default();
        BarrierConfig {
            schedule: ContinuationSchedule { mu0: self.mu0, theta: self.theta, ..base.schedule },
            bm: flowtopo::bm_solver::BmConfig { tolerance: self.tolerance, ..base.bm },
            precond: self.precond_config(),
            outer_atol: self.outer_atol,
            outer_rtol: self.outer_rtol,
            max_branches: self.max_branches,
            ..base
        }
    }

    pub fn mg_config(&self) -> MgConfig {
        MgConfig {
            levels: self.levels,
            cycle: CycleType::Full,
            atol: self.inner_atol,
            rtol: self.inner_rtol,
            ..MgConfig::default()
        }
    }

    /// Coarsest mesh dimensions.
    pub fn coarse_cells(&self) -> (usize, usize) {
        let k = 1usize << (self.levels - 1);
        (self.nx / k, self.ny / k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.nx, cfg.ny), (42, 28));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig { nx: 12, ny: 8, levels: 2, strategy: Strategy::AL2, gamma_d: 1e3, ..Default::default() };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn strategy_names_match_the_cli() {
        let cfg = RunConfig::from_toml("strategy = \"aL2\"\nlevels = 2\nnx = 12\nny = 8").unwrap();
        assert_eq!(cfg.strategy, Strategy::AL2);
        assert_eq!(cfg.coarse_cells(), (6, 4));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(RunConfig::from_toml("problem = \"cavity\"").is_err());
        assert!(RunConfig::from_toml("nx = 0").is_err());
        assert!(RunConfig::from_toml("strategy = \"aL2\"").is_err());
        assert!(RunConfig::from_toml("levels = 2\nnx = 13").is_err());
        assert!(RunConfig::from_toml("gamma_d = -1.0").is_err());
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = RunConfig::default();
        let o = Overrides { gamma_d: Some(1e2), max_branches: Some(1), out: Some("x".into()), ..Default::default() };
        cfg.apply(&o).unwrap();
        assert_eq!((cfg.gamma_d, cfg.max_branches), (1e2, 1));
        assert_eq!(cfg.barrier_config().precond.gamma_d, 1e2);
        let bad = Overrides { strategy: Some(Strategy::AL2), ..Default::default() };
        assert!(cfg.apply(&bad).is_err());
    }
}
