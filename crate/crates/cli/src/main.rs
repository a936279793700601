use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use flowtopo_cli::config::{Overrides, RunConfig, Strategy};
use flowtopo_cli::experiments::{self, DoublePipeRun};
use flowtopo_cli::output;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "flowtopo", version, about = "Deflated barrier topology optimization of Stokes flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the design branches of the double-pipe problem.
    DoublePipe(Common),
    /// Outer iterations and roundoff floors across augmentation parameters.
    GammaSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,1e1,1e2,1e3,1e4,1e5,1e6,1e7")]
        gammas: Vec<f64>,
    },
    /// Spectrum of the scaled Schur complement on a tiny mesh.
    SchurDiag {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "0,1e2,1e3,1e4,1e5")]
        gammas: Vec<f64>,
    },
    /// Velocity error against a manufactured Stokes solution.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
        sizes: Vec<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<Strategy>,
    #[arg(long)]
    gamma_d: Option<f64>,
    #[arg(long)]
    mu0: Option<f64>,
    #[arg(long)]
    max_branches: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            strategy: self.strategy,
            gamma_d: self.gamma_d,
            mu0: self.mu0,
            max_branches: self.max_branches,
            out: self.out.clone(),
        })?;
        Ok(cfg)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    elapsed_seconds: f64,
    stats: flowtopo::deflated_barrier::RunStats,
    average_outer_per_bm: f64,
    average_inner_per_solve: f64,
    branches: Vec<experiments::BranchSummary>,
}

fn write_double_pipe(cfg: &RunConfig, run: &DoublePipeRun) -> Result<()> {
    let out = &cfg.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for b in &run.archive.branches {
        let title = format!("double-pipe branch {} ({:?})", b.id, b.status);
        output::write_vtk(&out.join(format!("branch_{}.vtk", b.id)), &run.problem, &b.state, &title)?;
    }
    let csv = output::iteration_csv(&output::iteration_rows(&run.archive))?;
    fs::write(out.join("iterations.csv"), csv)?;
    let stats = run.archive.stats;
    let manifest = Manifest {
        config: cfg,
        elapsed_seconds: run.elapsed.as_secs_f64(),
        stats,
        average_outer_per_bm: stats.average_outer(),
        average_inner_per_solve: stats.average_inner(),
        branches: experiments::summarize(&run.problem, &run.archive),
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn write_table<T: Serialize>(out: &Path, name: &str, rows: &[T]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join(name))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    println!("{}", serde_json::to_string_pretty(rows)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::DoublePipe(common) => {
            let cfg = common.resolve()?;
            let run = experiments::run_double_pipe(&cfg)?;
            write_double_pipe(&cfg, &run)?;
            for s in experiments::summarize(&run.problem, &run.archive) {
                println!(
                    "branch {}: {:?} J = {:.4} |div u| = {:.2e} {:?}",
                    s.id, s.status, s.objective, s.divergence_norm, s.topology
                );
            }
            Ok(run.all_converged())
        }
        Command::GammaSweep { common, gammas } => {
            let cfg = common.resolve()?;
            write_table(&cfg.out, "gamma_sweep.csv", &experiments::gamma_sweep(&cfg, &gammas)?)?;
            Ok(true)
        }
        Command::SchurDiag { common, gammas } => {
            let cfg = common.resolve()?;
            write_table(&cfg.out, "schur.csv", &experiments::schur_diagnostic(&cfg, &gammas)?)?;
            Ok(true)
        }
        Command::Convergence { common, sizes } => {
            let cfg = common.resolve()?;
            write_table(&cfg.out, "convergence.csv", &experiments::convergence_study(cfg.problem_config(), &sizes)?)?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some branches did not reach mu = 0");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
