//! `arw` — command-line entry point for the activated-random-walk lab.
//!
//! Every run's output embeds the resolved configuration, artifact version,
//! and root seed, so runs replay byte-identically. Exit codes: 0 success,
//! 1 validation error (arguments, files, schema), 2 runtime instability
//! (estimator-unstable, budget/resource exhaustion).

mod commands;
mod output;
mod selftest;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "arw", version, about = "Activated random walk simulation laboratory")]
pub struct Cli {
    /// Worker thread count (results are independent of it).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// JSON config file; flags override file values override defaults.
    #[arg(long, global = true)]
    pub config: Option<std::path::PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stabilize a configuration literal and write the record.
    Stabilize(commands::StabilizeArgs),
    /// Strong-via-weak chance statistics over replicas.
    Chances(commands::ChancesArgs),
    /// Carpet-procedure campaign: JSONL per replica plus a summary CSV.
    Carpet(commands::CarpetArgs),
    /// Hole statistics campaign: JSONL per replica plus a rate CSV.
    Holes(commands::HolesArgs),
    /// Exact stabilization distribution on a tiny instance.
    Oracle(commands::OracleArgs),
    /// Green's function and escape probability of a kernel.
    Green(commands::GreenArgs),
    /// Sleep-at-origin probability q by truncated series.
    Q(commands::QArgs),
    /// Occupation-probability curve over a density grid.
    Curve(commands::CurveArgs),
    /// Critical-density estimate by bisection.
    Rhoc(commands::RhocArgs),
    /// Critical-density sweep over a lambda grid.
    Sweep(commands::SweepArgs),
    /// Mass-conservation deviation across volume radii.
    Masscheck(commands::MasscheckArgs),
    /// Abelian-shuffle and oracle-agreement self-tests.
    Selftest(commands::SelftestArgs),
}

/// Failures carry the exit code they map to.
#[derive(Debug)]
pub enum Failure {
    /// Bad arguments, malformed files, schema violations.
    Validation(String),
    /// Estimator-unstable, budget, or resource errors.
    Runtime(String),
}

impl Failure {
    fn exit_code(&self) -> i32 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<arw::ArwError> for Failure {
    fn from(e: arw::ArwError) -> Self {
        use arw::ArwError::*;
        match e {
            EstimatorUnstable(_) | BudgetExhausted { .. } | ResourceLimit(_) | OracleModel(_) => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(format!("io error: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(format!("malformed JSON: {e}"))
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => e.exit(),
            _ => {
                eprintln!("{e}");
                std::process::exit(1);
            }
        },
    };

    if let Some(threads) = cli.threads {
        // A second initialization in-process is harmless; results never
        // depend on the pool size.
        let _ = arw::parallel::set_global_threads(threads);
    }

    let file_config = match output::load_config_file(cli.config.as_deref()) {
        Ok(v) => v,
        Err(f) => {
            eprintln!("error: {}", message(&f));
            std::process::exit(f.exit_code());
        }
    };

    let result = match cli.command {
        Command::Stabilize(args) => commands::run_stabilize(args, &file_config),
        Command::Chances(args) => commands::run_chances(args, &file_config),
        Command::Carpet(args) => commands::run_carpet(args, &file_config),
        Command::Holes(args) => commands::run_holes(args, &file_config),
        Command::Oracle(args) => commands::run_oracle(args, &file_config),
        Command::Green(args) => commands::run_green(args, &file_config),
        Command::Q(args) => commands::run_q(args, &file_config),
        Command::Curve(args) => commands::run_curve(args, &file_config),
        Command::Rhoc(args) => commands::run_rhoc(args, &file_config),
        Command::Sweep(args) => commands::run_sweep(args, &file_config),
        Command::Masscheck(args) => commands::run_masscheck(args, &file_config),
        Command::Selftest(args) => selftest::run(args),
    };

    match result {
        Ok(()) => {}
        Err(f) => {
            eprintln!("error: {}", message(&f));
            std::process::exit(f.exit_code());
        }
    }
}

fn message(f: &Failure) -> String {
    match f {
        Failure::Validation(m) | Failure::Runtime(m) => m.clone(),
    }
}
