//! Command-line front end: instance and scenario documents in, solutions,
//! certificates, traces and summaries out.
//!
//! Exit status: 0 on success, 1 when a verification fails or a solver does
//! not converge, 2 on usage or configuration errors.

mod commands;
pub mod docs;
mod input;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use commands::run;
pub use input::parse_json;

/// Seed used when neither `--seed` nor `APEX_SEED` is set.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(
    name = "apex",
    version,
    about = "Pseudo-market assignment without money"
)]
pub struct Cli {
    /// Seed for sampled evaluations and simulations.
    #[arg(long, global = true, env = "APEX_SEED")]
    pub seed: Option<u64>,
    /// Output format: JSON lines, or CSV for flat summaries.
    #[arg(long, global = true, value_enum, default_value_t = Format::Lines)]
    pub format: Format,
    /// Write output here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Lines,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Welfare-maximizing assignment with VCG prices, duals and payments.
    Vcg { input: PathBuf },
    /// Regularized allocation with payments and quadratic price estimates.
    Regularized {
        input: PathBuf,
        #[arg(long, value_parser = positive)]
        beta: Option<f64>,
        #[arg(long = "lambda-bar", value_parser = positive)]
        lambda_bar: Option<f64>,
    },
    /// Search for an HZ equilibrium and certify the result.
    HzFind(HzFindArgs),
    /// Check an allocation and prices against the HZ conditions.
    HzVerify {
        input: PathBuf,
        #[arg(long, default_value_t = 1e-6, value_parser = non_negative)]
        delta: f64,
    },
    /// Run a repeated-auction scenario and write its trace.
    Simulate {
        config: PathBuf,
        /// Override the horizon; budgets are rescaled to keep their per-round rate.
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        rounds: Option<u64>,
        #[arg(long, value_parser = positive)]
        beta: Option<f64>,
        #[arg(long = "lambda-bar", value_parser = positive)]
        lambda_bar: Option<f64>,
    },
    /// Strong-regret reports for a trace, plus the aggregate certificate for
    /// regularized traces.
    Audit {
        trace: PathBuf,
        /// Require the aggregate certificate (fails on exact-VCG traces).
        #[arg(long)]
        aggregate: bool,
        #[arg(long, default_value_t = 0.1, value_parser = positive)]
        delta: f64,
    },
    /// Simulate and audit several scenarios in parallel; run `k` uses seed
    /// `seed + k`.
    Sweep {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        runs: u64,
        #[arg(long, default_value_t = 0.1, value_parser = positive)]
        delta: f64,
    },
}

#[derive(Debug, Args)]
pub struct HzFindArgs {
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    pub eps: f64,
    #[arg(long, default_value_t = 0.3, value_parser = unit_interval)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive)]
    pub tol: f64,
    #[arg(long, default_value_t = 512, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    #[arg(long = "max-iter", default_value_t = 5000)]
    pub max_iter: usize,
    #[arg(long = "lambda-bar", value_parser = positive)]
    pub lambda_bar: Option<f64>,
    #[arg(long, value_enum, default_value_t = Method::Newton)]
    pub method: Method,
    /// Tolerance of the certificate checked at the solution.
    #[arg(long, default_value_t = 0.05, value_parser = non_negative)]
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Newton,
    Damped,
}

fn number(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{s} is not finite"))
    }
}

fn positive(s: &str) -> Result<f64, String> {
    number(s).and_then(|v| {
        if v > 0.0 {
            Ok(v)
        } else {
            Err(format!("{s} must be > 0"))
        }
    })
}

fn non_negative(s: &str) -> Result<f64, String> {
    number(s).and_then(|v| {
        if v >= 0.0 {
            Ok(v)
        } else {
            Err(format!("{s} must be >= 0"))
        }
    })
}

fn unit_interval(s: &str) -> Result<f64, String> {
    number(s).and_then(|v| {
        if v > 0.0 && v <= 1.0 {
            Ok(v)
        } else {
            Err(format!("{s} must be in (0, 1]"))
        }
    })
}

/// Whether the command's checks passed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or malformed input: exit 2.
    Usage(anyhow::Error),
    /// A solver gave up: exit 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => e,
        }
    }
}

impl From<apex_core::ApexError> for CliError {
    fn from(e: apex_core::ApexError) -> Self {
        match e {
            apex_core::ApexError::NoConvergence { .. } => CliError::Runtime(e.into()),
            _ => CliError::Usage(e.into()),
        }
    }
}
