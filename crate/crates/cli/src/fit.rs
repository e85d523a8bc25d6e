use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Result};
use clap::Args;
use ella_core::autodiff::{forward, load_checkpoint, FlatParams};
use ella_core::fileio::file_sha256;
use ella_core::likelihood::{prior_variance, softmax, LikelihoodHead};
use ella_core::metrics::{error_vs_confidence, nll_dataset, write_curve_csv, MetricsReport, Prediction, DEFAULT_ECE_BINS};
use ella_core::nystrom::{sketch_from_data, NystromSketch, DEFAULT_RANK_CUTOFF};
use ella_core::posterior::{EarlyStop, EllaPosterior, DEFAULT_MC_SAMPLES};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{DataArgs, Split};
use crate::train::TrainMeta;
use crate::usage;

pub const DEFAULT_M: usize = 2000;
pub const DEFAULT_K: usize = 20;

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FitArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Number of landmarks.
    #[arg(long = "m", visible_alias = "M")]
    pub m: Option<usize>,
    /// Sketch rank.
    #[arg(long = "k", visible_alias = "K")]
    pub k: Option<usize>,
    /// Prior standard deviation σ₀.
    #[arg(long, conflicts_with_all = ["prior_var", "from_weight_decay"])]
    pub sigma0: Option<f64>,
    /// Prior variance σ₀².
    #[arg(long, conflicts_with = "from_weight_decay")]
    pub prior_var: Option<f64>,
    /// Set σ₀² = 1/(Nγ) for this γ (the checkpoint's weight decay by default).
    #[arg(long)]
    pub from_weight_decay: Option<f64>,
    /// Select the number of accumulated items by validation NLL.
    #[arg(long)]
    pub early_stop: bool,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rank_cutoff: Option<f64>,
    #[arg(long)]
    pub sketch_out: Option<PathBuf>,
    #[arg(long)]
    pub posterior_out: Option<PathBuf>,
}

fn load_model(path: &Option<PathBuf>) -> Result<(FlatParams, TrainMeta)> {
    let Some(path) = path else {
        return Err(usage("--checkpoint is required"));
    };
    let (params, meta) = load_checkpoint(path)?;
    Ok((params, TrainMeta::from_json(&meta)?))
}

pub fn run_fit(args: FitArgs) -> Result<()> {
    let (params, meta) = load_model(&args.checkpoint)?;
    let m = args.m.unwrap_or(DEFAULT_M);
    let k = args.k.unwrap_or(DEFAULT_K);
    if k == 0 || k > m {
        return Err(usage(&format!("need 1 <= K <= M, got K={k}, M={m}")));
    }
    let data_args = args.data.clone().or_saved(Some(meta.data.clone()));
    let train = data_args.load(Split::Train)?;
    let prior_var = match (args.sigma0, args.prior_var) {
        (Some(s), _) => s * s,
        (None, Some(v)) => v,
        (None, None) => prior_variance(train.len(), args.from_weight_decay.unwrap_or(meta.weight_decay))?,
    };
    let seed = args.seed.unwrap_or(0);
    let cutoff = args.rank_cutoff.unwrap_or(DEFAULT_RANK_CUTOFF);
    let sketch = sketch_from_data(&params, &train, m, k, seed, cutoff)?.drop_landmark_jacobian();
    log::info!("sketch: K={} of {k}, eigenvalues {:?}", sketch.k(), sketch.eigenvalues);
    let sketch_out = args.sketch_out.clone().unwrap_or_else(|| PathBuf::from("ella.sketch"));
    sketch.save(&sketch_out)?;
    let sketch_sha = file_sha256(&sketch_out)?;

    let early = if args.early_stop {
        let validation = DataArgs { split: Some(Split::Val), ..data_args.clone() }.load(Split::Val)?;
        Some(EarlyStop {
            validation,
            eval_every: args.eval_every.unwrap_or((train.len() / 10).max(1)),
            mc_samples: args.mc_samples.unwrap_or(DEFAULT_MC_SAMPLES),
            seed,
        })
    } else {
        None
    };
    let post = EllaPosterior::fit(Arc::new(sketch), &params, &train, meta.head, prior_var, early.as_ref())?;
    for c in post.fit_log() {
        log::info!("fit: {} items, validation nll {:.6}", c.items, c.validation_nll);
    }
    let posterior_out = args.posterior_out.clone().unwrap_or_else(|| PathBuf::from("ella.post"));
    let fit_meta = json!({ "m": m, "k": k, "seed": seed, "n_train": train.len() });
    post.save(&posterior_out, Some(sketch_sha.clone()), fit_meta)?;
    println!(
        "{}",
        json!({
            "sketch": sketch_out,
            "sketch_sha256": sketch_sha,
            "posterior": posterior_out,
            "posterior_sha256": file_sha256(&posterior_out)?,
            "k_used": post.sketch().k(),
            "prior_var": prior_var,
            "items_used": post.items_used(),
        })
    );
    Ok(())
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub sketch: Option<PathBuf>,
    #[arg(long)]
    pub posterior: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bins: Option<usize>,
    /// Also report the MAP network's predictive.
    #[arg(long)]
    pub map: bool,
    /// Write the reliability table here.
    #[arg(long)]
    pub bins_csv: Option<PathBuf>,
    /// Write the error-vs-confidence curve here.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct RegressionReport {
    nll: f64,
    rmse: f64,
    n: usize,
}

pub fn load_posterior(args: &EvalArgs) -> Result<(FlatParams, TrainMeta, EllaPosterior)> {
    let (params, meta) = load_model(&args.checkpoint)?;
    let (Some(sketch_path), Some(post_path)) = (&args.sketch, &args.posterior) else {
        return Err(usage("--sketch and --posterior are required"));
    };
    let sketch = Arc::new(NystromSketch::load(sketch_path)?);
    let (post, header) = EllaPosterior::load(post_path, sketch)?;
    if let Some(expected) = &header.sketch_sha256 {
        let found = file_sha256(sketch_path)?;
        if &found != expected {
            bail!("posterior was fitted with sketch {expected}, but {} has hash {found}", sketch_path.display());
        }
    }
    Ok((params, meta, post))
}

pub fn run_eval(args: EvalArgs) -> Result<()> {
    let (params, meta, post) = load_posterior(&args)?;
    let data = args.data.clone().or_saved(Some(meta.data.clone())).load(Split::Test)?;
    let samples = args.mc_samples.unwrap_or(DEFAULT_MC_SAMPLES);
    let seed = args.seed.unwrap_or(0);
    match post.head() {
        LikelihoodHead::Categorical => {
            let labels = data.labels().expect("categorical data has labels");
            let bins = args.bins.unwrap_or(DEFAULT_ECE_BINS);
            let probs = post.predictive_probs_batch(&params, &data.inputs, samples, seed)?;
            let report = MetricsReport::classification(&probs, labels, bins)?;
            println!("{}", json!({ "method": "ella", "report": report }));
            if let Some(path) = &args.bins_csv {
                report.write_bins_csv(BufWriter::new(File::create(path)?))?;
            }
            if let Some(path) = &args.curve_csv {
                let thresholds: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
                let curve = error_vs_confidence(&probs, labels, &thresholds)?;
                write_curve_csv(&curve, BufWriter::new(File::create(path)?))?;
            }
            if args.map {
                let map_probs: Vec<Vec<f64>> = data
                    .inputs
                    .par_iter()
                    .map(|x| forward(&params, x).map(|g| softmax(&g)))
                    .collect::<ella_core::Result<_>>()?;
                let map = MetricsReport::classification(&map_probs, labels, bins)?;
                println!("{}", json!({ "method": "map", "report": map }));
            }
        }
        head @ LikelihoodHead::Gaussian { .. } => {
            let preds = post.predict_batch(&params, &data.inputs)?;
            let rmse = ella_core::experiments::rmse(&params, &data)?;
            let wrapped: Vec<Prediction> = preds.into_iter().map(Prediction::Gaussian).collect();
            let nll = nll_dataset(&wrapped, &data, head)?;
            let report = RegressionReport { nll, rmse, n: data.len() };
            println!("{}", json!({ "method": "ella", "report": report }));
        }
    }
    Ok(())
}
