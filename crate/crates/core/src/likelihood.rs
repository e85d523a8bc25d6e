//! Likelihood heads, their negative log-likelihoods and output-space
//! Hessians `Λ(x, y) = −∇²_g log p(y | g)`.
//!
//! Training losses drop the Gaussian normalizing constant `½ log 2πσ²`;
//! evaluation metrics (see [`crate::metrics`]) include it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Target;
use crate::error::{EllaError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LikelihoodHead {
    Gaussian { noise_var: f64 },
    Categorical,
}

impl LikelihoodHead {
    pub fn gaussian(noise_var: f64) -> Result<Self> {
        if !(noise_var > 0.0) || !noise_var.is_finite() {
            return Err(EllaError::InvalidArgument(format!(
                "gaussian noise variance must be positive, got {noise_var}"
            )));
        }
        Ok(LikelihoodHead::Gaussian { noise_var })
    }

    /// Upper bound on `‖Λ(x, y)‖₂` over all inputs.
    pub fn c_lambda(&self) -> f64 {
        match self {
            LikelihoodHead::Gaussian { noise_var } => 1.0 / noise_var,
            LikelihoodHead::Categorical => 2.0,
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, LikelihoodHead::Categorical)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(g: &[f64]) -> Vec<f64> {
    let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = g.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_sum_exp(g: &[f64]) -> f64 {
    let m = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + g.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_logits(g: &[f64]) -> Result<()> {
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(EllaError::NonFinite(format!("network output {i} = {}", g[i])));
    }
    Ok(())
}

fn check_target(g: &[f64], y: Target<'_>, head: &LikelihoodHead) -> Result<()> {
    match (head, y) {
        (LikelihoodHead::Categorical, Target::Class(c)) if c < g.len() => Ok(()),
        (LikelihoodHead::Categorical, Target::Class(c)) => Err(EllaError::OutOfRange {
            what: "class label",
            index: c,
            len: g.len(),
        }),
        (LikelihoodHead::Gaussian { .. }, Target::Real(t)) if t.len() == g.len() => Ok(()),
        (LikelihoodHead::Gaussian { .. }, Target::Real(t)) => Err(EllaError::Shape(format!(
            "target has {} entries, output has {}",
            t.len(),
            g.len()
        ))),
        _ => Err(EllaError::InvalidArgument("target kind does not match likelihood head".into())),
    }
}

/// `−log p(y | g)`, constant-free for the Gaussian head.
pub fn nll(g: &[f64], y: Target<'_>, head: &LikelihoodHead) -> Result<f64> {
    check_logits(g)?;
    check_target(g, y, head)?;
    Ok(match (head, y) {
        (LikelihoodHead::Gaussian { noise_var }, Target::Real(t)) => {
            g.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (2.0 * noise_var)
        }
        (LikelihoodHead::Categorical, Target::Class(c)) => log_sum_exp(g) - g[c],
        _ => unreachable!(),
    })
}

/// `∂nll/∂g`.
pub fn nll_grad(g: &[f64], y: Target<'_>, head: &LikelihoodHead) -> Result<Vec<f64>> {
    check_logits(g)?;
    check_target(g, y, head)?;
    Ok(match (head, y) {
        (LikelihoodHead::Gaussian { noise_var }, Target::Real(t)) => {
            g.iter().zip(t).map(|(a, b)| (a - b) / noise_var).collect()
        }
        (LikelihoodHead::Categorical, Target::Class(c)) => {
            let mut p = softmax(g);
            p[c] -= 1.0;
            p
        }
        _ => unreachable!(),
    })
}

/// `Λ = −∇²_g log p(y | g)`: `I/σ²` for the Gaussian head and
/// `diag(p) − ppᵀ` with `p = softmax(g)` for the categorical head. Neither
/// depends on `y`.
pub fn lambda_hessian(g: &[f64], head: &LikelihoodHead) -> Result<DMatrix<f64>> {
    check_logits(g)?;
    let c = g.len();
    Ok(match head {
        LikelihoodHead::Gaussian { noise_var } => DMatrix::identity(c, c) / *noise_var,
        LikelihoodHead::Categorical => {
            let p = softmax(g);
            DMatrix::from_fn(c, c, |i, j| if i == j { p[i] - p[i] * p[j] } else { -p[i] * p[j] })
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "derivation", rename_all = "snake_case")]
pub enum PriorConfig {
    Explicit { prior_var: f64 },
    FromWeightDecay { n: usize, weight_decay: f64 },
}

impl PriorConfig {
    pub fn prior_var(&self) -> Result<f64> {
        match *self {
            PriorConfig::Explicit { prior_var } if prior_var > 0.0 && prior_var.is_finite() => Ok(prior_var),
            PriorConfig::Explicit { prior_var } => Err(EllaError::InvalidArgument(format!(
                "prior variance must be positive, got {prior_var}"
            ))),
            PriorConfig::FromWeightDecay { n, weight_decay } => prior_variance(n, weight_decay),
        }
    }
}

/// `σ₀² = 1/(N·γ)` for a network pretrained with weight decay `γ` on `N`
/// points.
pub fn prior_variance(n: usize, weight_decay: f64) -> Result<f64> {
    if n == 0 {
        return Err(EllaError::InvalidArgument("dataset size must be >= 1".into()));
    }
    if !(weight_decay > 0.0) || !weight_decay.is_finite() {
        return Err(EllaError::InvalidArgument(format!(
            "weight decay must be positive for a proper prior, got {weight_decay}"
        )));
    }
    Ok(1.0 / (n as f64 * weight_decay))
}
