//! `polarity`: ground state, forward solve, fitting and Monte Carlo for the
//! steady-state ROP1 polarity model.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::FileConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "polarity", version, about = "Steady-state ROP1 polarity model: solve, fit, simulate")]
pub struct Cli {
    /// TOML configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed recorded in reports and used by `simulate`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve -u'' = -u + u^alpha on [-C, C] and write the ground state.
    SolveGroundState(SolveArgs),
    /// Steady-state profile for given feedback rates.
    Forward(ForwardArgs),
    /// Fit intensity data from a `tube_id,position,intensity` CSV.
    Fit(FitArgs),
    /// Monte Carlo study of an estimator.
    Simulate(SimulateArgs),
}

/// Model constants; unset values come from the config file or the command
/// default.
#[derive(Debug, Clone, Default, Args)]
pub struct ConstantsArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Lateral diffusion rate D.
    #[arg(long)]
    pub diffusion: Option<f64>,
    /// Total free ROP1.
    #[arg(long)]
    pub r_tot: Option<f64>,
    /// Half-length of the observation window.
    #[arg(long)]
    pub l0: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GroundStateArgs {
    /// Half-width C of the ground-state domain.
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Ground-state grid step.
    #[arg(long)]
    pub gs_step: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub half_width: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Ground-state CSV (`x,sigma0,dsigma0`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[command(flatten)]
    pub constants: ConstantsArgs,
    #[command(flatten)]
    pub ground_state: GroundStateArgs,
    #[arg(long)]
    pub k_nf: Option<f64>,
    #[arg(long)]
    pub k_pf: Option<f64>,
    /// Root of g to use: `larger` or `smaller`.
    #[arg(long)]
    pub branch: Option<String>,
    /// Profile grid step.
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Profile CSV (`x,R`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Input CSV.
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub constants: ConstantsArgs,
    #[command(flatten)]
    pub ground_state: GroundStateArgs,
    /// `cnls` (per tube), `cnls-pooled`, `cmm` or `creml`.
    #[arg(long)]
    pub method: Option<String>,
    /// Starting fit for CREML; only `cmm` is available.
    #[arg(long)]
    pub start: Option<String>,
    /// Confidence level of the intervals.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub quantile_normalize: bool,
    #[arg(long)]
    pub background: bool,
    #[arg(long)]
    pub standardize: bool,
    /// Set negative values to zero after background subtraction.
    #[arg(long)]
    pub clamp_negative: bool,
    /// Smoother bandwidth for background and scaling.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Drop points more than 5 robust sds from their local median.
    #[arg(long)]
    pub remove_outliers: bool,
    /// CMM: drop tubes whose CNLS fit fails.
    #[arg(long)]
    pub exclude_failed: bool,
    /// Directory for report.json, fitted_curves.csv and preprocessed.csv.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// `table1`, `table2` (with `--case`), `table2-case1` or `table2-case2`.
    #[arg(long)]
    pub preset: Option<String>,
    /// Population design for `--preset table2`.
    #[arg(long)]
    pub case: Option<u8>,
    /// Population estimator: `cmm`, `creml` or `both`.
    #[arg(long)]
    pub method: Option<String>,
    /// Within-tube noise sd.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub level: Option<f64>,
    #[command(flatten)]
    pub ground_state: GroundStateArgs,
    /// Summary table CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    if let Some(threads) = cli.threads.or(file.threads) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    let seed = cli.seed.or(file.seed);
    match &cli.command {
        Command::SolveGroundState(a) => commands::solve(a, &file, seed),
        Command::Forward(a) => commands::forward(a, &file, seed),
        Command::Fit(a) => commands::fit(a, &file, seed),
        Command::Simulate(a) => commands::simulate(a, &file, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
