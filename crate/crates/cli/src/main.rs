//! `fedbcs`: run federated experiments, check gradients, cluster points and
//! evaluate the convergence bounds.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 numerical failure, 4 outside the convergence regime.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedbcs::federation::Method;
use fedbcs::server::Metric;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("outside the convergence regime: {0}")]
    Regime(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Regime(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fedbcs", version, about = "Federated segmentation simulator with style recalibration and prototype alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a federated experiment and print the final Dice table.
    Run(RunArgs),
    /// Print the effective configuration (defaults plus file and flags) as TOML.
    Config(RunArgs),
    /// Finite-difference check of every differentiable op and composite path.
    Gradcheck {
        /// Number of random instances per case.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// First seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Cluster points (one per line, comma or whitespace separated) by
    /// first-neighbour linking.
    Finch {
        points: PathBuf,
        #[arg(long, value_enum, default_value = "cosine")]
        metric: MetricArg,
        /// Maximum hierarchy levels to print.
        #[arg(long, default_value_t = 8)]
        levels: usize,
    },
    /// Evaluate the learning-rate bound, the λ_c bound and the round count.
    Bounds(BoundsArgs),
}

/// Flags override the configuration file; `FEDBCS_OUT` overrides `--out`.
#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML file with [federation] and [data] sections; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// fedbcs | fedavg | fedbcs-no-fsr | fedbcs-no-cdpa
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    /// Output directory (default runs/fedbcs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for client training.
    #[arg(long)]
    pub parallel: Option<usize>,
    /// Fail on non-finite values (`--checked`, `--checked=false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub checked: Option<bool>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => Metric::Cosine,
            MetricArg::Euclidean => Metric::Euclidean,
        }
    }
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Smoothness constant L.
    #[arg(long)]
    pub l_sm: f64,
    /// Gradient variance σ².
    #[arg(long)]
    pub sigma2: f64,
    /// Prototype norm bound G.
    #[arg(long)]
    pub g: f64,
    /// Temperature τ.
    #[arg(long)]
    pub tau: f64,
    #[arg(long)]
    pub lambda_c: f64,
    /// Local steps per round E.
    #[arg(long, default_value_t = 1.0)]
    pub e: f64,
    /// Learning rate η.
    #[arg(long)]
    pub eta: f64,
    /// Initial suboptimality Δ.
    #[arg(long, default_value_t = 1.0)]
    pub delta: f64,
    /// Target squared gradient norm ε.
    #[arg(long)]
    pub epsilon: f64,
    /// Σ‖∇F(Θ_e)‖² over a round; enables the one-round learning-rate bound.
    #[arg(long)]
    pub grad_norm_sum: Option<f64>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => commands::run(&args),
        Command::Config(args) => commands::print_config(&args),
        Command::Gradcheck { seeds, seed } => commands::gradcheck(seed, seeds),
        Command::Finch { points, metric, levels } => commands::finch(&points, metric.into(), levels),
        Command::Bounds(args) => commands::bounds(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
