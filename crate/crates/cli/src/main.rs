//! `spanel`: simulate, estimate, diagnose and run Monte Carlo grids from the command line.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::LevelFilter;

use commands::{Common, Failure};
use config::{EstimateConfig, IdentifyConfig, MonteCarloConfig, SimulateConfig, VerifyConfig};

#[derive(Debug, Parser)]
#[command(name = "spanel", version, about = "Linear-quadratic GMM for dynamic spatial panels")]
struct Cli {
    /// One of off, error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; all available cores when absent.
    #[arg(long, env = "SPANEL_WORKERS")]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Long-format panel CSV: unit, period, y, x_1.., z_1..
    #[arg(long)]
    data: PathBuf,
    /// Weight triplets CSV: kind, p, t, i, j, value.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct McArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Replications per cell, overriding the configuration.
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw one panel and network from the simulation design.
    Simulate(CommonArgs),
    /// GMM estimates, sandwich variance and Wald tests.
    Estimate(DataArgs),
    /// Rank diagnostics for the linear and quadratic moments.
    Identify(DataArgs),
    /// OLS, IV and GMM over a grid of designs.
    Montecarlo(McArgs),
    /// Compare linear-quadratic form moments with simulation.
    VerifyVclq(CommonArgs),
}

impl CommonArgs {
    fn common(&self) -> Common {
        Common {
            out: self.out.clone(),
            seed: self.seed,
            workers: self.workers,
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Simulate(a) => {
            let cfg: SimulateConfig = config::load(a.config.as_deref())?;
            commands::simulate(&a.common(), cfg)
        }
        Command::Estimate(a) => {
            let cfg: EstimateConfig = config::load(a.common.config.as_deref())?;
            commands::estimate(&a.common.common(), &a.data, a.weights.as_deref(), cfg)
        }
        Command::Identify(a) => {
            let cfg: IdentifyConfig = config::load(a.common.config.as_deref())?;
            commands::identify(&a.common.common(), &a.data, a.weights.as_deref(), cfg)
        }
        Command::Montecarlo(a) => {
            let cfg: MonteCarloConfig = config::load(a.common.config.as_deref())?;
            commands::montecarlo(&a.common.common(), a.replications, cfg)
        }
        Command::VerifyVclq(a) => {
            let cfg: VerifyConfig = config::load(a.config.as_deref())?;
            commands::verify_vclq(&a.common(), cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", e.message);
            if let Some(s) = e.schema {
                eprintln!("expected configuration, for example:\n{s}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Compute(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
