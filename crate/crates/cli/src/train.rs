use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use ella_core::autodiff::{save_checkpoint, Activation, ArchDescriptor, FlatParams};
use ella_core::data::{Dataset, Targets};
use ella_core::experiments::RegressionDemoConfig;
use ella_core::fileio::file_sha256;
use ella_core::likelihood::LikelihoodHead;
use ella_core::train::{calibrate_batchnorm, mean_nll, train_map_from, Optimizer, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{DataArgs, Split};
use crate::usage;

pub const DEFAULT_ITERATIONS: usize = 1000;
pub const DEFAULT_LR: f64 = 1e-2;
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationArg {
    Tanh,
    Relu,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// `mlp`, `convnet`, or a JSON architecture file.
    #[arg(long)]
    pub arch: Option<String>,
    /// Hidden widths of the MLP, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight decay γ of the objective `mean NLL + γ/2 ‖θ‖²`.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, visible_alias = "iterations")]
    pub iters: Option<usize>,
    /// Minibatch size; the whole training set by default.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Observation noise variance for real-valued targets.
    #[arg(long)]
    pub noise_var: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

/// What `fit` and `eval` need to know about how a checkpoint was trained.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMeta {
    pub data: DataArgs,
    pub head: LikelihoodHead,
    pub weight_decay: f64,
    pub n_train: usize,
    pub train: TrainConfig,
    pub final_train_nll: f64,
}

impl TrainMeta {
    pub fn from_json(meta: &serde_json::Value) -> Result<Self> {
        serde_json::from_value(meta.clone()).context("checkpoint metadata lacks training details")
    }
}

fn build_arch(args: &TrainArgs, data: &Dataset) -> Result<ArchDescriptor> {
    let default = if data.input_shape.len() == 3 { "convnet" } else { "mlp" };
    let kind = args.arch.as_deref().unwrap_or(default);
    let arch = match kind {
        "convnet" => ArchDescriptor::small_convnet(data.num_outputs)?,
        "mlp" => {
            let default_hidden = if args.data.demo_sine { RegressionDemoConfig::default().hidden } else { vec![50, 50] };
            let mut sizes = vec![data.inputs.first().map_or(0, Vec::len)];
            sizes.extend(args.hidden.clone().unwrap_or(default_hidden));
            sizes.push(data.num_outputs);
            let act = match args.activation.unwrap_or(ActivationArg::Tanh) {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Relu => Activation::Relu,
            };
            ArchDescriptor::mlp(&sizes, act)?
        }
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading architecture {path}"))?;
            serde_json::from_str(&text).with_context(|| format!("parsing architecture {path}"))?
        }
    };
    if arch.input_len() != data.inputs.first().map_or(0, Vec::len) {
        return Err(usage(&format!(
            "architecture expects {} inputs, data has {}",
            arch.input_len(),
            data.inputs.first().map_or(0, Vec::len)
        )));
    }
    if arch.num_outputs() != data.num_outputs {
        return Err(usage(&format!("architecture has {} outputs, data needs {}", arch.num_outputs(), data.num_outputs)));
    }
    Ok(arch)
}

pub fn head_for(data: &Dataset, args: &DataArgs, noise_var: Option<f64>) -> Result<LikelihoodHead> {
    Ok(match data.targets {
        Targets::Labels(_) => LikelihoodHead::Categorical,
        Targets::Real(_) => LikelihoodHead::gaussian(noise_var.unwrap_or_else(|| args.sine_noise_var()))?,
    })
}

pub fn run(args: TrainArgs) -> Result<()> {
    let data = args.data.load(Split::Train)?;
    let arch = Arc::new(build_arch(&args, &data)?);
    let head = head_for(&data, &args.data, args.noise_var)?;
    let lr = args.lr.unwrap_or(DEFAULT_LR);
    let optimizer = match args.optimizer.unwrap_or(OptimizerKind::Adam) {
        OptimizerKind::Adam => Optimizer::Adam { lr },
        OptimizerKind::Sgd => Optimizer::Sgd { lr, momentum: args.momentum.unwrap_or(0.9) },
    };
    let default_wd = if args.data.demo_sine { RegressionDemoConfig::default().weight_decay } else { DEFAULT_WEIGHT_DECAY };
    let seed = args.seed.unwrap_or(0);
    let cfg = TrainConfig {
        optimizer,
        weight_decay: args.weight_decay.unwrap_or(default_wd),
        iterations: args.iters.unwrap_or(DEFAULT_ITERATIONS),
        batch_size: args.batch_size.unwrap_or(data.len()),
        seed,
    };
    log::info!("training {} parameters on {} items ({})", arch.num_params(), data.len(), data.provenance);
    let init = calibrate_batchnorm(&FlatParams::init(arch, seed), &data.inputs)?;
    let params = train_map_from(init, &data, &head, &cfg)?;
    let final_train_nll = mean_nll(&params, &data, &head)?;
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let meta = TrainMeta {
        data: args.data.clone(),
        head,
        weight_decay: cfg.weight_decay,
        n_train: data.len(),
        train: cfg,
        final_train_nll,
    };
    save_checkpoint(&out, &params, serde_json::to_value(&meta)?)?;
    let sha = file_sha256(&out)?;
    println!("{}", json!({ "checkpoint": out, "sha256": sha, "train_nll": final_train_nll }));
    Ok(())
}
