//! `evnetd`: analysis, design and simulation of event-triggered loops
//! sharing a p-persistent CSMA channel.

mod analyze;
mod config;
mod output;
mod region;
mod simulate;
mod thresholds;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use output::Output;

#[derive(Parser)]
#[command(name = "evnetd", version, about = "Event-triggered control over a shared CSMA channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the network chain and test stability. Exit 0 if every loop is
    /// guaranteed stable, 1 otherwise, 2 on error.
    Analyze(Common),
    /// Constant-law stability region over a (p_gamma, p_alpha) grid.
    DesignRegion(Common),
    /// Event thresholds and error densities per delay.
    Thresholds(Common),
    /// Monte Carlo simulation of the network.
    Simulate(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Directory for the CSV output.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides simulate.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Only write files.
    #[arg(long)]
    quiet: bool,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("EVNETD_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("EVNETD_THREADS must be a positive integer, got {v:?}"))?;
        anyhow::ensure!(n >= 1, "EVNETD_THREADS must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    init_threads()?;
    let (Command::Analyze(c) | Command::DesignRegion(c) | Command::Thresholds(c) | Command::Simulate(c)) = &cli.command;
    let cfg = ExperimentConfig::load(&c.config)?;
    let out = Output::new(&c.out, c.quiet)?;
    match &cli.command {
        Command::Analyze(_) => analyze::run(&cfg, &out),
        Command::DesignRegion(_) => region::run(&cfg, &out).map(|_| true),
        Command::Thresholds(_) => thresholds::run(&cfg, &out).map(|_| true),
        Command::Simulate(_) => simulate::run(&cfg, c.seed, &out).map(|_| true),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
