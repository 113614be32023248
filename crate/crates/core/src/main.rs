use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use hybrid_bem::config::{ConfigError, Experiment, ExperimentConfig};
use hybrid_bem::experiments::{self, ExperimentError, RunOptions};

/// Backward Euler-Maruyama experiments for SDEs with Markovian switching.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads, overriding `run.workers`. Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory, overriding `run.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Solver tolerance, overriding `solver.tol`.
    #[arg(long, global = true)]
    tol: Option<f64>,

    /// Run even when the step size is not below the admissible bound.
    #[arg(long, global = true)]
    allow_unstable_step: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Check the model constants, the switching condition and the step bound.
    Check,
    /// Simulate one trajectory per initial condition.
    Simulate,
    /// Densities and consecutive K-S tests along one ensemble.
    Invariant,
    /// Pairwise Wasserstein distances between ensembles from different initial data.
    InitialIndependence,
    /// Decay of the mean distance between coupled trajectories.
    CouplingDecay,
    /// Convergence order of the numerical invariant measure in the step size.
    WassersteinOrder,
}

fn print<T: Serialize>(report: &T) -> Result<(), ExperimentError> {
    println!("{}", serde_json::to_string_pretty(report).map_err(std::io::Error::other)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<i32, ExperimentError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| ConfigError::Invalid { field: "--config".into(), message: "a config file is required".into() })?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.run.seed = seed;
    }
    if let Some(workers) = cli.workers {
        config.run.workers = workers;
    }
    if let Some(out) = &cli.out {
        config.run.output_dir = out.display().to_string();
    }
    if let Some(tol) = cli.tol {
        config.solver.tol = tol;
    }
    let exp = Experiment::from_config(config)?;
    let opts = RunOptions { out_dir: PathBuf::from(&exp.config.run.output_dir), allow_unstable_step: cli.allow_unstable_step };
    match cli.command {
        Command::Check => {
            let report = experiments::cmd_check(&exp, &opts)?;
            print(&report)?;
            return Ok(if report.passes { 0 } else { 3 });
        }
        Command::Simulate => print(&experiments::cmd_simulate(&exp, &opts)?)?,
        Command::Invariant => print(&experiments::cmd_invariant(&exp, &opts)?)?,
        Command::InitialIndependence => print(&experiments::cmd_initial_independence(&exp, &opts)?)?,
        Command::CouplingDecay => print(&experiments::cmd_coupling_decay(&exp, &opts)?)?,
        Command::WassersteinOrder => {
            let report = experiments::cmd_wasserstein_order(&exp, &opts)?;
            if let Some(warning) = &report.warning {
                eprintln!("warning: {warning}");
            }
            print(&report)?;
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
