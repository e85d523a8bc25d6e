//! MAP training: minimize `mean nll + (γ/2)‖θ‖²` with SGD or Adam.
//!
//! The weight-decay term covers every parameter including biases, matching
//! the isotropic prior `N(0, σ₀² I)` with `σ₀² = 1/(Nγ)`.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, forward, forward_trace, ArchDescriptor, FlatParams, Layer};
use crate::data::Dataset;
use crate::error::{EllaError, Result};
use crate::likelihood::{nll, nll_grad, LikelihoodHead};

/// Examples per work unit when summing a minibatch gradient. Fixed so the
/// reduction order, and hence the result, does not depend on thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr >= 0.0 && lr.is_finite();
        let ok = match self.optimizer {
            Optimizer::Sgd { lr, momentum } => lr_ok(lr) && (0.0..1.0).contains(&momentum),
            Optimizer::Adam { lr } => lr_ok(lr),
        };
        if !ok {
            return Err(EllaError::InvalidArgument(format!(
                "bad optimizer settings {:?}",
                self.optimizer
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(EllaError::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(EllaError::InvalidArgument(
                "iterations and batch size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Mean negative log-likelihood over a dataset (constant-free convention).
pub fn mean_nll(params: &FlatParams, data: &Dataset, head: &LikelihoodHead) -> Result<f64> {
    if data.is_empty() {
        return Err(EllaError::InvalidArgument("empty dataset".into()));
    }
    let terms: Vec<f64> = (0..data.len())
        .into_par_iter()
        .map(|i| nll(&forward(params, &data.inputs[i])?, data.target(i), head))
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum::<f64>() / data.len() as f64)
}

/// `mean nll + (γ/2)‖θ‖²`.
pub fn objective(params: &FlatParams, data: &Dataset, head: &LikelihoodHead, weight_decay: f64) -> Result<f64> {
    let sq: f64 = params.values().iter().map(|v| v * v).sum();
    Ok(mean_nll(params, data, head)? + 0.5 * weight_decay * sq)
}

/// Summed nll and summed parameter gradient over `idx`.
fn batch_nll_grad(
    params: &FlatParams,
    data: &Dataset,
    head: &LikelihoodHead,
    idx: &[usize],
) -> Result<(f64, Vec<f64>)> {
    let partials: Vec<(f64, Vec<f64>)> = idx
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grad = vec![0.0; params.len()];
            let mut loss = 0.0;
            for &i in chunk {
                let trace = forward_trace(params, &data.inputs[i])?;
                let g = trace.last().unwrap();
                loss += nll(g, data.target(i), head)?;
                let cot = nll_grad(g, data.target(i), head)?;
                backward(params, &trace, &cot, &mut grad)?;
            }
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((loss, grad))
}

/// Train from the seeded default initialization.
pub fn train_map(
    arch: Arc<ArchDescriptor>,
    data: &Dataset,
    head: &LikelihoodHead,
    cfg: &TrainConfig,
) -> Result<FlatParams> {
    train_map_from(FlatParams::init(arch, cfg.seed), data, head, cfg)
}

/// Train starting from `init`. Deterministic given `cfg.seed`.
pub fn train_map_from(
    init: FlatParams,
    data: &Dataset,
    head: &LikelihoodHead,
    cfg: &TrainConfig,
) -> Result<FlatParams> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(EllaError::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let n = data.len();
    let p = init.len();
    let mut theta = init.values().to_vec();
    let mut params = init;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let bs = cfg.batch_size.min(n);
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    let (beta1, beta2, adam_eps) = (0.9f64, 0.999f64, 1e-8);

    for it in 1..=cfg.iterations {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + bs];
        cursor += bs;
        let (loss_sum, mut grad) = batch_nll_grad(&params, data, head, batch)?;
        let scale = 1.0 / bs as f64;
        let sq: f64 = theta.iter().map(|v| v * v).sum();
        let loss = loss_sum * scale + 0.5 * cfg.weight_decay * sq;
        if !loss.is_finite() {
            return Err(EllaError::Diverged { iteration: it, loss });
        }
        for (g, t) in grad.iter_mut().zip(&theta) {
            *g = *g * scale + cfg.weight_decay * t;
        }
        match cfg.optimizer {
            Optimizer::Sgd { lr, momentum } => {
                for j in 0..p {
                    m1[j] = momentum * m1[j] + grad[j];
                    theta[j] -= lr * m1[j];
                }
            }
            Optimizer::Adam { lr } => {
                let c1 = 1.0 - beta1.powi(it as i32);
                let c2 = 1.0 - beta2.powi(it as i32);
                for j in 0..p {
                    m1[j] = beta1 * m1[j] + (1.0 - beta1) * grad[j];
                    m2[j] = beta2 * m2[j] + (1.0 - beta2) * grad[j] * grad[j];
                    theta[j] -= lr * (m1[j] / c1) / ((m2[j] / c2).sqrt() + adam_eps);
                }
            }
        }
        if let Some(j) = theta.iter().position(|v| !v.is_finite()) {
            return Err(EllaError::Diverged {
                iteration: it,
                loss: theta[j],
            });
        }
        params = params.with_values(theta.clone())?;
        if it % 200 == 0 || it == cfg.iterations {
            log::debug!("iteration {it}: batch objective {loss:.6}");
        }
    }
    Ok(params)
}

/// Set every batchnorm layer's frozen statistics to the per-channel mean
/// and (population) variance of its inputs over `inputs`, front to back.
pub fn calibrate_batchnorm(params: &FlatParams, inputs: &[Vec<f64>]) -> Result<FlatParams> {
    if inputs.is_empty() {
        return Err(EllaError::InvalidArgument("need inputs to calibrate batchnorm".into()));
    }
    let mut current = params.clone();
    let bn_layers: Vec<(usize, usize)> = params
        .arch()
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l {
            Layer::BatchNorm { channels, .. } => Some((i, *channels)),
            _ => None,
        })
        .collect();
    for (li, channels) in bn_layers {
        let traces: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|x| forward_trace(&current, x).map(|t| t[li].clone()))
            .collect::<Result<_>>()?;
        let spatial = traces[0].len() / channels;
        let count = (traces.len() * spatial) as f64;
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for t in &traces {
            for c in 0..channels {
                mean[c] += t[c * spatial..(c + 1) * spatial].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for t in &traces {
            for c in 0..channels {
                var[c] += t[c * spatial..(c + 1) * spatial]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let arch = current.arch().with_batchnorm_stats(li, mean, var)?;
        current = current.with_arch(Arc::new(arch))?;
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Layer};
    use crate::data::{gen_two_moons, Targets};

    fn adam(lr: f64, iterations: usize) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Adam { lr },
            weight_decay: 1e-3,
            iterations,
            batch_size: 16,
            seed: 3,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let arch = Arc::new(ArchDescriptor::mlp(&[2, 4, 2], Activation::Tanh).unwrap());
        let data = gen_two_moons(10, 0.1, 0);
        let out = train_map(arch.clone(), &data, &LikelihoodHead::Categorical, &adam(0.0, 1)).unwrap();
        assert_eq!(out, FlatParams::init(arch, 3));
    }

    #[test]
    fn linear_regression_improves() {
        let arch = Arc::new(
            ArchDescriptor::new(vec![1], vec![Layer::Dense { inputs: 1, outputs: 1 }]).unwrap(),
        );
        let data = Dataset::new(
            vec![vec![-1.0], vec![0.0], vec![1.0]],
            vec![1],
            Targets::Real(vec![vec![-2.0], vec![0.5], vec![3.0]]),
            1,
            "toy",
        )
        .unwrap();
        let head = LikelihoodHead::gaussian(1.0).unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd { lr: 0.1, momentum: 0.5 },
            weight_decay: 0.0,
            iterations: 300,
            batch_size: 3,
            seed: 1,
        };
        let init = FlatParams::init(arch.clone(), 1);
        let trained = train_map(arch, &data, &head, &cfg).unwrap();
        assert!(mean_nll(&trained, &data, &head).unwrap() < mean_nll(&init, &data, &head).unwrap());
        // least squares: slope 2.5, intercept 0.5
        assert!((trained.values()[0] - 2.5).abs() < 1e-6);
        assert!((trained.values()[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let arch = Arc::new(ArchDescriptor::mlp(&[2, 8, 2], Activation::Tanh).unwrap());
        let data = gen_two_moons(40, 0.1, 0);
        let a = train_map(arch.clone(), &data, &LikelihoodHead::Categorical, &adam(1e-2, 30)).unwrap();
        let b = train_map(arch, &data, &LikelihoodHead::Categorical, &adam(1e-2, 30)).unwrap();
        let bits = |p: &FlatParams| p.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn divergence_names_iteration() {
        let arch = Arc::new(
            ArchDescriptor::new(vec![1], vec![Layer::Dense { inputs: 1, outputs: 1 }]).unwrap(),
        );
        let data = Dataset::new(vec![vec![100.0]], vec![1], Targets::Real(vec![vec![0.0]]), 1, "").unwrap();
        let cfg = TrainConfig {
            optimizer: Optimizer::Sgd { lr: 10.0, momentum: 0.0 },
            weight_decay: 0.0,
            iterations: 500,
            batch_size: 1,
            seed: 0,
        };
        let err = train_map(arch, &data, &LikelihoodHead::gaussian(1.0).unwrap(), &cfg).unwrap_err();
        assert!(matches!(err, EllaError::Diverged { iteration, .. } if iteration > 1));
    }

    #[test]
    fn batchnorm_calibration_standardizes() {
        let arch = Arc::new(
            ArchDescriptor::new(
                vec![2],
                vec![Layer::batchnorm(2), Layer::Dense { inputs: 2, outputs: 1 }],
            )
            .unwrap(),
        );
        let params = FlatParams::init(arch, 0);
        let inputs = vec![vec![1.0, 10.0], vec![3.0, 14.0]];
        let cal = calibrate_batchnorm(&params, &inputs).unwrap();
        match &cal.arch().layers()[0] {
            Layer::BatchNorm { mean, var, .. } => {
                assert_eq!(mean, &vec![2.0, 12.0]);
                assert_eq!(var, &vec![1.0, 4.0]);
            }
            _ => unreachable!(),
        }
    }
}
