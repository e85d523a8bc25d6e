//! End-to-end studies shared by the CLI and the acceptance tests: the 1-D
//! regression comparison, the M/K sweep on two moons, the MNIST subset
//! study and theorem verification.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward, jacobian, Activation, ArchDescriptor, FlatParams};
use crate::data::{gen_sine_regression_with, gen_two_moons, load_idx, split_sizes, Dataset, SineConfig, Target};
use crate::error::{EllaError, Result};
use crate::likelihood::{prior_variance, softmax, LikelihoodHead};
use crate::linalg::{spectral_norm_sym, symmetrize};
use crate::metrics::{categorical_nll, MetricsReport, DEFAULT_ECE_BINS};
use crate::nystrom::{build_sketch, landmark_jacobian, sample_landmarks, NystromSketch, DEFAULT_RANK_CUTOFF};
use crate::oracle::{check_theorem_bounds, epsilon_ella, kl_gaussian, random_instance, DenseJacobian, LlaOracle, TheoremBoundReport};
use crate::posterior::{EllaPosterior, PredictiveGaussian};
use crate::train::{calibrate_batchnorm, train_map, train_map_from, Optimizer, TrainConfig};

/// `verify`: theorem reports for `instances` random problems; problem `i`
/// uses seed `seed + i`.
pub fn verify(instances: usize, seed: u64, delta: f64) -> Result<Vec<TheoremBoundReport>> {
    (0..instances)
        .into_par_iter()
        .map(|i| check_theorem_bounds(&random_instance(seed.wrapping_add(i as u64))?, delta))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionDemoConfig {
    pub n_train: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Overrides `σ₀² = 1/(Nγ)` when set.
    pub prior_var: Option<f64>,
    pub noise_var: f64,
    pub m: usize,
    pub k: usize,
    pub grid_points: usize,
    pub grid_low: f64,
    pub grid_high: f64,
    /// Compare predictive distributions of `y` (latent covariance plus
    /// noise variance) rather than of the latent `f`.
    pub kl_include_noise: bool,
}

impl Default for RegressionDemoConfig {
    fn default() -> Self {
        Self {
            n_train: 16,
            seed: 0,
            hidden: vec![50, 50, 50],
            iterations: 1000,
            lr: 1e-2,
            weight_decay: 0.0625,
            prior_var: None,
            noise_var: 0.04,
            m: 16,
            k: 5,
            grid_points: 200,
            grid_low: -4.0,
            grid_high: 4.0,
            kl_include_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionDemoRow {
    pub x: f64,
    pub mean: f64,
    pub ella_std: f64,
    pub lla_std: f64,
    pub diag_std: f64,
    pub lastlayer_std: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegressionDemoResult {
    pub rows: Vec<RegressionDemoRow>,
    /// Mean over the grid of `KL(method ‖ exact LLA)`.
    pub kl_ella: f64,
    pub kl_diag: f64,
    pub kl_lastlayer: f64,
    pub train_rmse: f64,
    pub prior_var: f64,
    pub k_used: usize,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    /// ELLA predictive std at each training input.
    pub train_ella_std: Vec<f64>,
}

pub fn regression_grid(cfg: &RegressionDemoConfig) -> Vec<f64> {
    let n = cfg.grid_points;
    if n == 1 {
        return vec![cfg.grid_low];
    }
    (0..n)
        .map(|i| cfg.grid_low + (cfg.grid_high - cfg.grid_low) * i as f64 / (n - 1) as f64)
        .collect()
}

pub fn rmse(params: &FlatParams, data: &Dataset) -> Result<f64> {
    let mut se = 0.0;
    for (i, x) in data.inputs.iter().enumerate() {
        let g = forward(params, x)?;
        let Target::Real(t) = data.target(i) else {
            return Err(EllaError::InvalidArgument("rmse needs regression targets".into()));
        };
        se += g.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((se / (data.len() * data.num_outputs) as f64).sqrt())
}

/// Fit a tanh MLP to `y = sin 2x + ε` and compare ELLA, diagonal-GGN LLA and
/// last-layer LLA against exact LLA on a grid.
pub fn regression_demo(cfg: &RegressionDemoConfig) -> Result<RegressionDemoResult> {
    let data = gen_sine_regression_with(
        cfg.n_train,
        cfg.seed,
        SineConfig { noise_var: cfg.noise_var, ..SineConfig::default() },
    );
    let mut sizes = vec![1];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let arch = Arc::new(ArchDescriptor::mlp(&sizes, Activation::Tanh)?);
    let head = LikelihoodHead::gaussian(cfg.noise_var)?;
    let tcfg = TrainConfig {
        optimizer: Optimizer::Adam { lr: cfg.lr },
        weight_decay: cfg.weight_decay,
        iterations: cfg.iterations,
        batch_size: cfg.n_train,
        seed: cfg.seed.wrapping_add(1),
    };
    let params = train_map(arch.clone(), &data, &head, &tcfg)?;
    let train_rmse = rmse(&params, &data)?;
    let prior_var = match cfg.prior_var {
        Some(v) => v,
        None => prior_variance(cfg.n_train, cfg.weight_decay)?,
    };

    let landmarks = sample_landmarks(&data, 1, cfg.m, cfg.seed.wrapping_add(2))?;
    let sketch = Arc::new(build_sketch(&landmark_jacobian(&params, &data, &landmarks)?, cfg.k, DEFAULT_RANK_CUTOFF)?);
    let post = EllaPosterior::fit(sketch.clone(), &params, &data, head, prior_var, None)?;
    let exact = LlaOracle::from_model(&params, &data, &head, prior_var)?;
    let last = exact.last_layer(&arch)?;

    let grid = regression_grid(cfg);
    let per_point: Vec<(RegressionDemoRow, [f64; 3])> = grid
        .par_iter()
        .map(|&x| {
            let xv = [x];
            let j = jacobian(&params, &xv)?;
            let ella = post.predict_f(&params, &xv)?;
            let g = ella.mean.clone();
            let gauss = |cov: DMatrix<f64>| PredictiveGaussian::new(g.clone(), cov);
            let lla = gauss(exact.kappa_lla_exact(&j, &j))?;
            let diag = gauss(exact.kappa_lla_diag(&j, &j))?;
            let ll = gauss(last.kappa_lla_exact(&j, &j))?;
            let obs = |p: &PredictiveGaussian| {
                let mut q = p.clone();
                if cfg.kl_include_noise {
                    q.covariance[(0, 0)] += cfg.noise_var;
                }
                q
            };
            let reference = obs(&lla);
            let kls = [
                kl_gaussian(&obs(&ella), &reference)?,
                kl_gaussian(&obs(&diag), &reference)?,
                kl_gaussian(&obs(&ll), &reference)?,
            ];
            let row = RegressionDemoRow {
                x,
                mean: g[0],
                ella_std: ella.std()[0],
                lla_std: lla.std()[0],
                diag_std: diag.std()[0],
                lastlayer_std: ll.std()[0],
            };
            Ok((row, kls))
        })
        .collect::<Result<_>>()?;
    let n = per_point.len().max(1) as f64;
    let mean_kl = |i: usize| per_point.iter().map(|(_, k)| k[i]).sum::<f64>() / n;
    let (kl_ella, kl_diag, kl_lastlayer) = (mean_kl(0), mean_kl(1), mean_kl(2));
    let train_y = match &data.targets {
        crate::data::Targets::Real(r) => r.iter().map(|v| v[0]).collect(),
        _ => unreachable!(),
    };
    let train_ella_std = post
        .predict_batch(&params, &data.inputs)?
        .iter()
        .map(|p| p.std()[0])
        .collect();
    Ok(RegressionDemoResult {
        rows: per_point.into_iter().map(|(r, _)| r).collect(),
        kl_ella,
        kl_diag,
        kl_lastlayer,
        train_rmse,
        prior_var,
        k_used: sketch.k(),
        train_x: data.inputs.iter().map(|x| x[0]).collect(),
        train_y,
        train_ella_std,
    })
}

pub fn write_demo_csv<W: Write>(result: &RegressionDemoResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &result.rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub m_grid: Vec<usize>,
    pub k_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    pub model_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub noise: f64,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub mc_samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            m_grid: vec![64, 512],
            k_grid: vec![8, 64],
            seeds: (0..5).collect(),
            model_seed: 0,
            n_train: 500,
            n_val: 100,
            n_test: 200,
            noise: 0.2,
            hidden: vec![50, 50],
            iterations: 500,
            lr: 1e-2,
            weight_decay: 1e-3,
            mc_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    pub k: usize,
    pub k_used: usize,
    pub seed: u64,
    pub eps_nystrom: f64,
    pub eps_ella: f64,
    pub test_nll: f64,
}

/// Everything the sweep rows share: the trained network, data splits, the
/// dense training Jacobian and its kernel, and the exact-LLA oracle.
pub struct SweepSetup {
    pub params: FlatParams,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub prior_var: f64,
    pub j_train: DMatrix<f64>,
    pub kernel: DMatrix<f64>,
    pub kernel_norm: f64,
    pub oracle: LlaOracle,
}

impl SweepSetup {
    pub fn new(cfg: &SweepConfig) -> Result<Self> {
        let all = gen_two_moons(cfg.n_train + cfg.n_val + cfg.n_test, cfg.noise, cfg.model_seed);
        let parts = split_sizes(&all, &[cfg.n_train, cfg.n_val, cfg.n_test], cfg.model_seed)?;
        let mut parts = parts.into_iter();
        let (train, val, test) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
        let mut sizes = vec![2];
        sizes.extend(&cfg.hidden);
        sizes.push(2);
        let arch = Arc::new(ArchDescriptor::mlp(&sizes, Activation::Tanh)?);
        let head = LikelihoodHead::Categorical;
        let tcfg = TrainConfig {
            optimizer: Optimizer::Adam { lr: cfg.lr },
            weight_decay: cfg.weight_decay,
            iterations: cfg.iterations,
            batch_size: cfg.n_train,
            seed: cfg.model_seed.wrapping_add(1),
        };
        let params = train_map(arch, &train, &head, &tcfg)?;
        let prior_var = prior_variance(cfg.n_train, cfg.weight_decay)?;
        let j_train = DenseJacobian::compute(&params, &train.inputs)?.into_matrix();
        let kernel = symmetrize(&(&j_train * j_train.transpose()));
        let kernel_norm = spectral_norm_sym(&kernel);
        let oracle = LlaOracle::from_model(&params, &train, &head, prior_var)?;
        Ok(Self { params, train, val, test, prior_var, j_train, kernel, kernel_norm, oracle })
    }

    /// `‖Φ_XΦ_Xᵀ − J_XJ_Xᵀ‖ / ‖J_XJ_Xᵀ‖` for the rank-K sketch.
    pub fn eps_nystrom(&self, sketch: &NystromSketch) -> f64 {
        let phi_x = &self.j_train * sketch.directions.transpose();
        let diff = symmetrize(&(&phi_x * phi_x.transpose() - &self.kernel));
        spectral_norm_sym(&diff) / self.kernel_norm
    }

    pub fn row(&self, m: usize, k: usize, seed: u64, mc_samples: usize) -> Result<SweepRow> {
        let landmarks = sample_landmarks(&self.train, 2, m, seed)?;
        let jl = landmark_jacobian(&self.params, &self.train, &landmarks)?;
        self.row_from_landmarks(&jl, m, k, seed, mc_samples)
    }

    fn row_from_landmarks(&self, jl: &DMatrix<f64>, m: usize, k: usize, seed: u64, mc_samples: usize) -> Result<SweepRow> {
        let sketch = Arc::new(build_sketch(jl, k, DEFAULT_RANK_CUTOFF)?.drop_landmark_jacobian());
        let eps_nystrom = self.eps_nystrom(&sketch);
        let post = EllaPosterior::fit(sketch.clone(), &self.params, &self.train, LikelihoodHead::Categorical, self.prior_var, None)?;
        let eps_ella = epsilon_ella(&post, &self.params, &self.oracle, &self.val.inputs)?;
        let probs = post.predictive_probs_batch(&self.params, &self.test.inputs, mc_samples, seed)?;
        let labels = self.test.labels().expect("labels");
        let test_nll = probs.iter().zip(labels).map(|(p, &y)| categorical_nll(p, y)).sum::<f64>() / labels.len() as f64;
        Ok(SweepRow { m, k, k_used: sketch.k(), seed, eps_nystrom, eps_ella, test_nll })
    }
}

/// One row per `(M, K, seed)` with `K ≤ M`; landmarks are shared across K.
pub fn sweep(cfg: &SweepConfig) -> Result<Vec<SweepRow>> {
    let setup = SweepSetup::new(cfg)?;
    let mut rows = Vec::new();
    for &m in &cfg.m_grid {
        for &seed in &cfg.seeds {
            let landmarks = sample_landmarks(&setup.train, 2, m, seed)?;
            let jl = landmark_jacobian(&setup.params, &setup.train, &landmarks)?;
            for &k in &cfg.k_grid {
                if k > m {
                    log::warn!("sweep: skipping K={k} > M={m}");
                    continue;
                }
                let row = setup.row_from_landmarks(&jl, m, k, seed, cfg.mc_samples)?;
                log::info!("sweep: {row:?}");
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MnistConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: Option<usize>,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub m: usize,
    pub k: usize,
    pub mc_samples: usize,
    pub ece_bins: usize,
}

impl Default for MnistConfig {
    fn default() -> Self {
        Self {
            images: PathBuf::from("data/mnist-5k/images-idx3-ubyte.gz"),
            labels: PathBuf::from("data/mnist-5k/labels-idx1-ubyte.gz"),
            n_train: 2000,
            n_val: 256,
            n_test: None,
            seed: 0,
            iterations: 1000,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-3,
            m: 256,
            k: 16,
            mc_samples: 512,
            ece_bins: DEFAULT_ECE_BINS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MnistResult {
    pub seed: u64,
    pub prior_var: f64,
    pub k_used: usize,
    pub map: MetricsReport,
    pub ella: MetricsReport,
}

/// Train the small conv net on a seeded split, then compare MAP and ELLA
/// predictive metrics on the held-out images.
pub fn mnist_study(cfg: &MnistConfig) -> Result<MnistResult> {
    let all = load_idx(&cfg.images, &cfg.labels)?;
    let rest = all.len().saturating_sub(cfg.n_train + cfg.n_val);
    let n_test = cfg.n_test.unwrap_or(rest).min(rest);
    if n_test == 0 {
        return Err(EllaError::InvalidArgument("no images left for testing".into()));
    }
    let parts = split_sizes(&all, &[cfg.n_train, cfg.n_val, n_test], cfg.seed)?;
    let mut parts = parts.into_iter();
    let (train, test) = (parts.next().unwrap(), parts.nth(1).unwrap());
    let arch = Arc::new(ArchDescriptor::small_convnet(all.num_outputs)?);
    let init = calibrate_batchnorm(&FlatParams::init(arch, cfg.seed.wrapping_add(1)), &train.inputs)?;
    let head = LikelihoodHead::Categorical;
    let tcfg = TrainConfig {
        optimizer: Optimizer::Adam { lr: cfg.lr },
        weight_decay: cfg.weight_decay,
        iterations: cfg.iterations,
        batch_size: cfg.batch_size,
        seed: cfg.seed.wrapping_add(2),
    };
    let params = train_map_from(init, &train, &head, &tcfg)?;
    let prior_var = prior_variance(train.len(), cfg.weight_decay)?;

    let landmarks = sample_landmarks(&train, all.num_outputs, cfg.m, cfg.seed.wrapping_add(3))?;
    let jl = landmark_jacobian(&params, &train, &landmarks)?;
    let sketch = Arc::new(build_sketch(&jl, cfg.k, DEFAULT_RANK_CUTOFF)?.drop_landmark_jacobian());
    let post = EllaPosterior::fit(sketch.clone(), &params, &train, head, prior_var, None)?;

    let labels = test.labels().expect("labels");
    let map_probs: Vec<Vec<f64>> = test
        .inputs
        .par_iter()
        .map(|x| forward(&params, x).map(|g| softmax(&g)))
        .collect::<Result<_>>()?;
    let ella_probs = post.predictive_probs_batch(&params, &test.inputs, cfg.mc_samples, cfg.seed.wrapping_add(4))?;
    Ok(MnistResult {
        seed: cfg.seed,
        prior_var,
        k_used: sketch.k(),
        map: MetricsReport::classification(&map_probs, labels, cfg.ece_bins)?,
        ella: MetricsReport::classification(&ella_probs, labels, cfg.ece_bins)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints() {
        let g = regression_grid(&RegressionDemoConfig::default());
        assert_eq!(g.len(), 200);
        assert_eq!(g[0], -4.0);
        assert_eq!(g[199], 4.0);
    }

    #[test]
    fn verify_zero_instances() {
        assert!(verify(0, 0, 0.1).unwrap().is_empty());
    }
}
