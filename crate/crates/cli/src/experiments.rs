use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use ella_core::experiments::{
    regression_demo, sweep, verify, write_demo_csv, write_sweep_csv, RegressionDemoConfig, SweepConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::usage;

pub const DEFAULT_INSTANCES: usize = 100;
pub const DEFAULT_DELTA: f64 = 0.1;

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',', visible_alias = "M-grid")]
    pub m_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', visible_alias = "K-grid")]
    pub k_grid: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl SweepArgs {
    pub fn config(&self) -> SweepConfig {
        let d = SweepConfig::default();
        SweepConfig {
            m_grid: self.m_grid.clone().unwrap_or(d.m_grid),
            k_grid: self.k_grid.clone().unwrap_or(d.k_grid),
            seeds: self.seeds.clone().unwrap_or(d.seeds),
            model_seed: self.model_seed.unwrap_or(d.model_seed),
            n_train: self.n_train.unwrap_or(d.n_train),
            n_val: self.n_val.unwrap_or(d.n_val),
            n_test: self.n_test.unwrap_or(d.n_test),
            noise: self.noise.unwrap_or(d.noise),
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            iterations: self.iters.unwrap_or(d.iterations),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            mc_samples: self.mc_samples.unwrap_or(d.mc_samples),
        }
    }
}

pub fn run_sweep(args: SweepArgs) -> Result<()> {
    let cfg = args.config();
    if cfg.m_grid.is_empty() || cfg.k_grid.is_empty() || cfg.seeds.is_empty() {
        return Err(usage("the M grid, K grid and seed list must be nonempty"));
    }
    let rows = sweep(&cfg)?;
    write_sweep_csv(&rows, output(&args.out)?)?;
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyArgs {
    #[arg(long)]
    pub instances: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Failure probability of the high-probability bounds.
    #[arg(long)]
    pub delta: Option<f64>,
}

pub fn run_verify(args: VerifyArgs) -> Result<()> {
    let reports = verify(
        args.instances.unwrap_or(DEFAULT_INSTANCES),
        args.seed.unwrap_or(0),
        args.delta.unwrap_or(DEFAULT_DELTA),
    )?;
    let mut out = io::stdout().lock();
    for r in &reports {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    let held = reports.iter().filter(|r| r.holds_thm0).count();
    log::info!("verify: bound held on {held}/{} instances", reports.len());
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "m", visible_alias = "M")]
    pub m: Option<usize>,
    #[arg(long = "k", visible_alias = "K")]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Prior variance; `1/(Nγ)` by default.
    #[arg(long)]
    pub prior_var: Option<f64>,
    #[arg(long)]
    pub noise_var: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub grid_low: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub grid_high: Option<f64>,
    /// Compare predictives of `y` instead of the latent `f`.
    #[arg(long)]
    pub kl_include_noise: bool,
    /// CSV destination; stdout by default.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Write the KL summary as JSON here.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

impl DemoArgs {
    pub fn config(&self) -> RegressionDemoConfig {
        let d = RegressionDemoConfig::default();
        RegressionDemoConfig {
            n_train: self.n.unwrap_or(d.n_train),
            seed: self.seed.unwrap_or(d.seed),
            hidden: self.hidden.clone().unwrap_or(d.hidden),
            iterations: self.iters.unwrap_or(d.iterations),
            lr: self.lr.unwrap_or(d.lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            prior_var: self.prior_var.or(d.prior_var),
            noise_var: self.noise_var.unwrap_or(d.noise_var),
            m: self.m.unwrap_or(d.m),
            k: self.k.unwrap_or(d.k),
            grid_points: self.grid_points.unwrap_or(d.grid_points),
            grid_low: self.grid_low.unwrap_or(d.grid_low),
            grid_high: self.grid_high.unwrap_or(d.grid_high),
            kl_include_noise: self.kl_include_noise || d.kl_include_noise,
        }
    }
}

pub fn run_demo(args: DemoArgs) -> Result<()> {
    let cfg = args.config();
    if cfg.k == 0 || cfg.k > cfg.m {
        return Err(usage(&format!("need 1 <= K <= M, got K={}, M={}", cfg.k, cfg.m)));
    }
    let result = regression_demo(&cfg)?;
    write_demo_csv(&result, output(&args.out)?)?;
    let summary = json!({
        "seed": cfg.seed,
        "kl_ella": result.kl_ella,
        "kl_diag": result.kl_diag,
        "kl_lastlayer": result.kl_lastlayer,
        "train_rmse": result.train_rmse,
        "prior_var": result.prior_var,
        "k_used": result.k_used,
    });
    log::info!("demo-regression: {summary}");
    if let Some(path) = &args.summary {
        std::fs::write(path, format!("{summary}\n"))?;
    }
    Ok(())
}
