//! `cadmm`: batch front end for generating instances, solving them and
//! evaluating payment rules. Every output table is CSV.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use coupled_admm::{CtadmmError, GraphError, MechanismError, Mode, OracleError, TransportError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Solver(#[from] CtadmmError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    NotConverged,
}

#[derive(Debug, Parser)]
#[command(name = "cadmm", version, about = "Distributed coupled-QP solver and incentive mechanisms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded instance file.
    Gen(GenArgs),
    /// Run the distributed solver; writes trace.csv and solution.csv.
    Solve(RunArgs),
    /// Evaluate payment rules; writes payments.csv.
    Mechanism(RunArgs),
    /// One agent shifts its reported costs over a grid; writes sweep.csv.
    MisreportSweep(RunArgs),
    /// Random joint misreports; writes portfolio.csv.
    MisreportPortfolio(RunArgs),
    /// Check a config, its instance and the consensus weights.
    Validate(RunArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Config with a `generate` section or an inline network.
    #[arg(long, conflicts_with = "scale")]
    config: Option<PathBuf>,
    /// Balanced instance scale `N,M,K,R`.
    #[arg(long, value_delimiter = ',')]
    scale: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Instance file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's `output_dir`, then `.`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Sets both stopping tolerances.
    #[arg(long)]
    tol: Option<f64>,
    /// Record wall-clock time per iteration in the trace.
    #[arg(long)]
    timing: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a.config.as_deref(), a.scale.as_deref(), a.seed, &a.out),
        Command::Solve(a) => a.load().and_then(|run| commands::solve(&run)),
        Command::Mechanism(a) => a.load().and_then(|run| commands::mechanism(&run)),
        Command::MisreportSweep(a) => a.load().and_then(|run| commands::misreport_sweep(&run)),
        Command::MisreportPortfolio(a) => a.load().and_then(|run| commands::misreport_portfolio(&run)),
        Command::Validate(a) => a.load().and_then(|run| commands::validate(&run)),
    };
    match result {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

impl RunArgs {
    /// Applies the command-line overrides on top of the config file.
    fn load(self) -> Result<commands::Run, CliError> {
        let mut cfg = config::ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            if let Some(p) = cfg.misreport.as_mut().and_then(|m| m.portfolio.as_mut()) {
                p.seed = seed;
            }
        }
        let mut params = cfg.solver_params();
        if let Some(mode) = self.mode {
            params.mode = mode;
        }
        if let Some(k) = self.max_iter {
            params.max_iter = k;
        }
        if let Some(tol) = self.tol {
            params.rel_error_tol = tol;
            params.violation_tol = tol;
        }
        params.record_timing |= self.timing;
        params.validate()?;
        cfg.solver = Some(params);
        let out = self
            .out
            .or_else(|| cfg.output_dir.clone())
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(commands::Run { config: cfg, out })
    }
}
