//! `crossalpha`: synthetic data, factor construction, evaluation, portfolio
//! optimization and walk-forward backtests from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossalpha", version = crossalpha::VERSION, about, after_long_help = help_reference())]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores when unset.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

fn help_reference() -> String {
    format!("Configuration keys and defaults:\n\n{}", RunConfig::reference())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic price panel with a planted signal.
    Synth(SynthArgs),
    /// Evaluate the configured factor definitions on a panel.
    Factors(FactorsArgs),
    /// Neutralize factors against industry, size and PCA exposures.
    Neutralize(NeutralizeArgs),
    /// Information-coefficient report for a set of factors.
    Eval(EvalArgs),
    /// Walk-forward backtest writing a results bundle.
    Backtest(BacktestArgs),
    /// Solve one portfolio problem.
    Optimize(OptimizeArgs),
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    securities: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    signal_strength: Option<f64>,
    /// Panel CSV to write.
    #[arg(long, default_value = "panel.csv")]
    out: PathBuf,
    /// Also write the planted factor in long format.
    #[arg(long)]
    factor_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FactorsArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Directory receiving one `<name>.csv` per factor.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NeutralizeArgs {
    #[arg(long)]
    panel: PathBuf,
    /// Directory of factor CSVs.
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    factors: PathBuf,
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    /// `pearson` or `spearman`.
    #[arg(long, value_parser = ["pearson", "spearman"])]
    method: Option<String>,
    /// Report CSV to write.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    panel: PathBuf,
    #[arg(long)]
    factors: PathBuf,
    /// Bundle directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// CSV with columns `security_id,mu`.
    #[arg(long)]
    mu: PathBuf,
    /// Directory holding loadings.csv, factor_cov.csv and idio_var.csv.
    #[arg(long)]
    risk: PathBuf,
    /// CSV with columns `security_id,weight`; flat when absent.
    #[arg(long)]
    prev: Option<PathBuf>,
    /// CSV with columns `security_id,industry`.
    #[arg(long)]
    sectors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CROSSALPHA_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Version = cli.command {
        println!("crossalpha {}", crossalpha::VERSION);
        return Ok(());
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let (cfg, config_text) = RunConfig::load(cli.config.as_deref())?;
    let ctx = commands::Context {
        cfg,
        config_text,
        seed: cli.seed,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Factors(a) => commands::factors(&ctx, a),
        Command::Neutralize(a) => commands::neutralize(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Backtest(a) => commands::backtest(&ctx, a),
        Command::Optimize(a) => commands::optimize(&ctx, a),
        Command::Version => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn help_lists_every_default_key() {
        let help = help_reference();
        for key in [
            "min_history",
            "signal_strength",
            "chunk_days",
            "alpha0",
            "decay_horizons",
            "idio_floor",
            "ridge_lambda",
            "lambda_risk",
            "w_max",
            "over_relaxation",
            "train_days",
            "rebalance_every",
            "warm_start",
            "backtest.purge_gap",
            "optimizer.solver.rho",
        ] {
            assert!(help.contains(key), "missing {key}");
        }
    }
}
