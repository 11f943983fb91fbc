//! Command-line front end: configuration, experiment subcommands and file
//! output.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::output::OutputDir;

#[derive(Debug, Parser)]
#[command(
    name = "insens",
    version,
    about = "Insensitizing controls and Carleman audits for the 1D fourth-order NLS"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward solve; writes the trajectory and mass/energy series.
    Simulate(RunArgs),
    /// Penalized HUM control for every epsilon in the config.
    Control(RunArgs),
    /// Adjoint and finite-difference sentinel derivatives for random directions.
    InsensitizeCheck(RunArgs),
    /// Empirical Carleman constants over a (lambda, mu) grid.
    CarlemanScan(RunArgs),
    /// Manufactured-solution refinement study.
    Convergence(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `seed` in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Simulate(a)
            | Command::Control(a)
            | Command::InsensitizeCheck(a)
            | Command::CarlemanScan(a)
            | Command::Convergence(a) => a,
        }
    }
}

/// Loads the configuration, applies overrides and runs the subcommand.
pub fn run(cli: &Cli) -> CliResult<Vec<String>> {
    let args = cli.command.args();
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let root = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .ok_or_else(|| {
            CliError::Validation("no output directory: pass --out or set `output`".into())
        })?;
    // the header must not depend on where the files land
    cfg.output = None;
    let out = OutputDir::create(&root, cfg.provenance())?;
    match &cli.command {
        Command::Simulate(_) => commands::simulate(&cfg, &out),
        Command::Control(_) => commands::control(&cfg, &out),
        Command::InsensitizeCheck(_) => commands::insensitize_check(&cfg, &out),
        Command::CarlemanScan(_) => commands::carleman_scan(&cfg, &out),
        Command::Convergence(_) => commands::convergence(&cfg, &out),
    }
}
