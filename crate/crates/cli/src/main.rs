//! `ella`: train a network, sketch its tangent kernel, fit and evaluate the
//! linearized-Laplace posterior, and run the small studies.

mod config;
mod dataset;
mod experiments;
mod fit;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::ConfigFile;

pub const WORKERS_ENV: &str = "ELLA_WORKERS";

#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: &str) -> anyhow::Error {
    UsageError(msg.to_string()).into()
}

#[derive(Parser, Debug)]
#[command(name = "ella", version, about = "Nyström-sketched linearized Laplace for small networks")]
struct Cli {
    /// TOML file with one table per subcommand; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a MAP network and write a checkpoint.
    Train(train::TrainArgs),
    /// Build the sketch and fit the posterior for a checkpoint.
    Fit(fit::FitArgs),
    /// Score a fitted posterior on a dataset.
    Eval(fit::EvalArgs),
    /// Approximation error and test NLL over an (M, K) grid.
    Sweep(experiments::SweepArgs),
    /// Check the approximation bounds on random small problems.
    Verify(experiments::VerifyArgs),
    /// 1-D regression comparison against exact and baseline posteriors.
    DemoRegression(experiments::DemoArgs),
}

fn init_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(&format!("{WORKERS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_workers()?;
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::Train(a) => train::run(config::overlay(&a, file.section("train"))?),
        Command::Fit(a) => fit::run_fit(config::overlay(&a, file.section("fit"))?),
        Command::Eval(a) => fit::run_eval(config::overlay(&a, file.section("eval"))?),
        Command::Sweep(a) => experiments::run_sweep(config::overlay(&a, file.section("sweep"))?),
        Command::Verify(a) => experiments::run_verify(config::overlay(&a, file.section("verify"))?),
        Command::DemoRegression(a) => experiments::run_demo(config::overlay(&a, file.section("demo-regression"))?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
