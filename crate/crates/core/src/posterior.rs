//! ELLA posterior: the `K × K` precision
//! `G = Σ_i φ(x_i)ᵀ Λ(x_i, y_i) φ(x_i) + I/σ₀²`, its Cholesky factor, and the
//! resulting GP predictive `f(x) ~ N(g(x), φ(x) G⁻¹ φ(x)ᵀ)`.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::FlatParams;
use crate::data::Dataset;
use crate::error::{EllaError, Result};
use crate::fileio;
use crate::likelihood::{lambda_hessian, softmax, LikelihoodHead};
use crate::linalg::{cholesky, cholesky_with_jitter};
use crate::metrics::gaussian_nll;
use crate::nystrom::{phi, NystromSketch};

pub const POSTERIOR_FORMAT: &str = "ella-posterior";
pub const POSTERIOR_VERSION: u32 = 1;
pub const DEFAULT_MC_SAMPLES: usize = 512;
pub const SAMPLING_JITTER: f64 = 1e-10;
pub const SAMPLING_JITTER_ESCALATIONS: usize = 3;
const ACCUMULATE_CHUNK: usize = 32;

/// Mean `g(x) ∈ R^C` and latent covariance `κ(x, x) ∈ R^{C×C}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictiveGaussian {
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl PredictiveGaussian {
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let c = mean.len();
        if covariance.nrows() != c || covariance.ncols() != c {
            return Err(EllaError::Shape(format!(
                "covariance is {}x{}, mean has {c} entries",
                covariance.nrows(),
                covariance.ncols()
            )));
        }
        Ok(Self { mean, covariance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.covariance[(i, i)].max(0.0).sqrt()).collect()
    }

    /// Monte Carlo estimate of `E[softmax(f)]` with `S` draws.
    ///
    /// Draws use a Cholesky factor of `covariance + jitter·I`, with jitter
    /// starting at `1e-10·tr(cov)/C` and growing tenfold at most three times.
    /// A zero covariance returns `softmax(mean)` exactly.
    pub fn mc_softmax(&self, samples: usize, seed: u64) -> Result<Vec<f64>> {
        if samples == 0 {
            return Err(EllaError::InvalidArgument("need at least one MC sample".into()));
        }
        let c = self.dim();
        let trace = self.covariance.trace();
        if trace == 0.0 && self.covariance.iter().all(|v| *v == 0.0) {
            return Ok(softmax(&self.mean));
        }
        if !trace.is_finite() || trace < 0.0 {
            return Err(EllaError::NonFinite(format!("predictive covariance trace {trace}")));
        }
        let (chol, _) = cholesky_with_jitter(&self.covariance, SAMPLING_JITTER * trace / c as f64, SAMPLING_JITTER_ESCALATIONS)?;
        let l = chol.l();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = vec![0.0; c];
        let mut z = vec![0.0; c];
        let mut f = vec![0.0; c];
        for _ in 0..samples {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            for i in 0..c {
                f[i] = self.mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>();
            }
            for (a, p) in acc.iter_mut().zip(softmax(&f)) {
                *a += p;
            }
        }
        Ok(acc.into_iter().map(|a| a / samples as f64).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitCheckpoint {
    /// Number of training items accumulated into `G`.
    pub items: usize,
    pub validation_nll: f64,
}

/// Validation-driven early stopping: `G` is evaluated after every
/// `eval_every` items (and at 0 and N), and the best checkpoint is kept.
#[derive(Clone, Debug)]
pub struct EarlyStop {
    pub validation: Dataset,
    pub eval_every: usize,
    pub mc_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct EllaPosterior {
    sketch: Arc<NystromSketch>,
    g_chol: DMatrix<f64>,
    prior_var: f64,
    head: LikelihoodHead,
    items_used: usize,
    fit_log: Vec<FitCheckpoint>,
    selected: Option<usize>,
}

/// `φ(x_i)` and `Λ(x_i)` for every item, in dataset order.
fn features_and_hessians(
    params: &FlatParams,
    sketch: &NystromSketch,
    inputs: &[Vec<f64>],
    head: &LikelihoodHead,
) -> Result<Vec<(Vec<f64>, DMatrix<f64>, DMatrix<f64>)>> {
    inputs
        .par_iter()
        .map(|x| {
            let (g, f) = phi(params, sketch, x)?;
            let lam = lambda_hessian(&g, head)?;
            Ok((g, f, lam))
        })
        .collect()
}

/// `Σ φᵀΛφ` over `blocks`, summed in fixed-size chunks computed in parallel
/// and reduced in order, so the result does not depend on thread count.
pub fn ggn_sum(blocks: &[(DMatrix<f64>, DMatrix<f64>)], k: usize) -> DMatrix<f64> {
    let partials: Vec<DMatrix<f64>> = blocks
        .par_chunks(ACCUMULATE_CHUNK)
        .map(|chunk| {
            let mut g = DMatrix::zeros(k, k);
            for (f, lam) in chunk {
                g += f.transpose() * lam * f;
            }
            g
        })
        .collect();
    partials.into_iter().fold(DMatrix::zeros(k, k), |acc, p| acc + p)
}

/// `G = Σ φᵀΛφ + I/σ₀²`.
pub fn precision_from_features(blocks: &[(DMatrix<f64>, DMatrix<f64>)], k: usize, prior_var: f64) -> DMatrix<f64> {
    let mut g = ggn_sum(blocks, k);
    for i in 0..k {
        g[(i, i)] += 1.0 / prior_var;
    }
    g
}

fn check_prior(prior_var: f64) -> Result<()> {
    if !(prior_var > 0.0) || !prior_var.is_finite() {
        return Err(EllaError::InvalidArgument(format!("prior variance must be positive, got {prior_var}")));
    }
    Ok(())
}

impl EllaPosterior {
    /// Accumulate `G` over `dataset` in order. With `early_stop`, the
    /// validation NLL is logged at each checkpoint and the posterior at the
    /// checkpoint with the smallest NLL is returned.
    pub fn fit(
        sketch: Arc<NystromSketch>,
        params: &FlatParams,
        dataset: &Dataset,
        head: LikelihoodHead,
        prior_var: f64,
        early_stop: Option<&EarlyStop>,
    ) -> Result<Self> {
        check_prior(prior_var)?;
        if dataset.is_empty() {
            return Err(EllaError::InvalidArgument("cannot fit a posterior on an empty dataset".into()));
        }
        if dataset.num_outputs != params.arch().num_outputs() {
            return Err(EllaError::Shape(format!(
                "dataset has {} outputs, network has {}",
                dataset.num_outputs,
                params.arch().num_outputs()
            )));
        }
        let k = sketch.k();
        let blocks: Vec<(DMatrix<f64>, DMatrix<f64>)> = features_and_hessians(params, &sketch, &dataset.inputs, &head)?
            .into_iter()
            .map(|(_, f, l)| (f, l))
            .collect();
        let n = blocks.len();

        let Some(es) = early_stop else {
            let g = precision_from_features(&blocks, k, prior_var);
            let chol = cholesky(&g, "posterior precision G")?;
            return Ok(Self {
                sketch,
                g_chol: chol.l(),
                prior_var,
                head,
                items_used: n,
                fit_log: Vec::new(),
                selected: None,
            });
        };

        if es.eval_every == 0 {
            return Err(EllaError::InvalidArgument("eval_every must be >= 1".into()));
        }
        if es.validation.is_empty() {
            return Err(EllaError::InvalidArgument("early stopping needs a nonempty validation set".into()));
        }
        let val: Vec<(Vec<f64>, DMatrix<f64>)> = features_and_hessians(params, &sketch, &es.validation.inputs, &head)?
            .into_iter()
            .map(|(g, f, _)| (g, f))
            .collect();

        let mut marks: Vec<usize> = (0..n).step_by(es.eval_every).collect();
        if marks.last() != Some(&n) {
            marks.push(n);
        }
        let mut g = DMatrix::zeros(k, k);
        for i in 0..k {
            g[(i, i)] = 1.0 / prior_var;
        }
        let mut done = 0;
        let mut log = Vec::with_capacity(marks.len());
        let mut factors = Vec::with_capacity(marks.len());
        for &mark in &marks {
            g += ggn_sum(&blocks[done..mark], k);
            done = mark;
            let l = cholesky(&g, "posterior precision G")?.l();
            let nll = validation_nll(&l, &val, &es.validation, &head, es.mc_samples, es.seed)?;
            log::debug!("early stop: {mark} items, validation nll {nll:.6}");
            log.push(FitCheckpoint { items: mark, validation_nll: nll });
            factors.push(l);
        }
        let best = log
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.validation_nll.total_cmp(&b.1.validation_nll))
            .map(|(i, _)| i)
            .expect("at least one checkpoint");
        Ok(Self {
            sketch,
            g_chol: factors.swap_remove(best),
            prior_var,
            head,
            items_used: log[best].items,
            fit_log: log,
            selected: Some(best),
        })
    }

    /// Build directly from a precision matrix.
    pub fn from_precision(
        sketch: Arc<NystromSketch>,
        g: &DMatrix<f64>,
        prior_var: f64,
        head: LikelihoodHead,
        items_used: usize,
    ) -> Result<Self> {
        check_prior(prior_var)?;
        if g.nrows() != sketch.k() || g.ncols() != sketch.k() {
            return Err(EllaError::Shape("precision size does not match sketch K".into()));
        }
        Ok(Self {
            sketch,
            g_chol: cholesky(g, "posterior precision G")?.l(),
            prior_var,
            head,
            items_used,
            fit_log: Vec::new(),
            selected: None,
        })
    }

    pub fn sketch(&self) -> &Arc<NystromSketch> {
        &self.sketch
    }

    pub fn g_chol(&self) -> &DMatrix<f64> {
        &self.g_chol
    }

    pub fn precision(&self) -> DMatrix<f64> {
        &self.g_chol * self.g_chol.transpose()
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn head(&self) -> &LikelihoodHead {
        &self.head
    }

    pub fn items_used(&self) -> usize {
        self.items_used
    }

    pub fn fit_log(&self) -> &[FitCheckpoint] {
        &self.fit_log
    }

    pub fn selected(&self) -> Option<usize> {
        self.selected
    }

    /// `L⁻¹φᵀ`, so that `φ G⁻¹ φ′ᵀ = (L⁻¹φᵀ)ᵀ(L⁻¹φ′ᵀ)`.
    fn whiten(&self, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        solve_lower(&self.g_chol, &features.transpose())
    }

    /// `φ G⁻¹ φ′ᵀ` for precomputed features.
    pub fn covariance_from_features(&self, f: &DMatrix<f64>, f2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let a = self.whiten(f)?;
        let b = self.whiten(f2)?;
        Ok(a.transpose() * b)
    }

    pub fn predict_f(&self, params: &FlatParams, x: &[f64]) -> Result<PredictiveGaussian> {
        let (g, f) = phi(params, &self.sketch, x)?;
        let cov = self.covariance_from_features(&f, &f)?;
        PredictiveGaussian::new(g, cov)
    }

    pub fn predict_batch(&self, params: &FlatParams, inputs: &[Vec<f64>]) -> Result<Vec<PredictiveGaussian>> {
        inputs.par_iter().map(|x| self.predict_f(params, x)).collect()
    }

    /// Cross-covariance `κ_ELLA(x, x′) = φ(x) G⁻¹ φ(x′)ᵀ`.
    pub fn kappa_ella(&self, params: &FlatParams, x: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        let (_, f) = phi(params, &self.sketch, x)?;
        let (_, f2) = phi(params, &self.sketch, x2)?;
        self.covariance_from_features(&f, &f2)
    }

    /// MC posterior predictive class probabilities.
    pub fn predictive_probs(&self, params: &FlatParams, x: &[f64], samples: usize, seed: u64) -> Result<Vec<f64>> {
        if !self.head.is_categorical() {
            return Err(EllaError::InvalidArgument("predictive_probs needs a categorical head".into()));
        }
        self.predict_f(params, x)?.mc_softmax(samples, seed)
    }

    /// Predictive probabilities for a batch; item `i` uses seed `seed + i`.
    pub fn predictive_probs_batch(
        &self,
        params: &FlatParams,
        inputs: &[Vec<f64>],
        samples: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        if !self.head.is_categorical() {
            return Err(EllaError::InvalidArgument("predictive_probs needs a categorical head".into()));
        }
        inputs
            .par_iter()
            .enumerate()
            .map(|(i, x)| self.predict_f(params, x)?.mc_softmax(samples, seed.wrapping_add(i as u64)))
            .collect()
    }

    /// Write `G`'s Cholesky factor with a header referencing the sketch.
    pub fn save(&self, path: impl AsRef<Path>, sketch_sha256: Option<String>, meta: serde_json::Value) -> Result<()> {
        let k = self.sketch.k();
        let header = PosteriorHeader {
            format: POSTERIOR_FORMAT.into(),
            version: POSTERIOR_VERSION,
            sketch_sha256,
            k,
            prior_var: self.prior_var,
            head: self.head,
            items_used: self.items_used,
            fit_log: self.fit_log.clone(),
            selected: self.selected,
            meta,
        };
        let payload: Vec<f64> = (0..k).flat_map(|r| (0..k).map(move |c| (r, c))).map(|(r, c)| self.g_chol[(r, c)]).collect();
        fileio::save(path, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>, sketch: Arc<NystromSketch>) -> Result<(Self, PosteriorHeader)> {
        let (h, payload): (PosteriorHeader, Vec<f64>) = fileio::load(path)?;
        fileio::check_format(&h.format, POSTERIOR_FORMAT, h.version, POSTERIOR_VERSION)?;
        if h.k != sketch.k() || payload.len() != h.k * h.k {
            return Err(EllaError::Format(format!(
                "posterior has K={} ({} doubles), sketch has K={}",
                h.k,
                payload.len(),
                sketch.k()
            )));
        }
        let post = Self {
            sketch,
            g_chol: DMatrix::from_row_slice(h.k, h.k, &payload),
            prior_var: h.prior_var,
            head: h.head,
            items_used: h.items_used,
            fit_log: h.fit_log.clone(),
            selected: h.selected,
        };
        Ok((post, h))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorHeader {
    pub format: String,
    pub version: u32,
    pub sketch_sha256: Option<String>,
    pub k: usize,
    pub prior_var: f64,
    pub head: LikelihoodHead,
    pub items_used: usize,
    pub fit_log: Vec<FitCheckpoint>,
    pub selected: Option<usize>,
    pub meta: serde_json::Value,
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    l.solve_lower_triangular(b)
        .ok_or_else(|| EllaError::Linalg("singular Cholesky factor".into()))
}

/// Mean validation NLL under the predictive implied by factor `l`.
fn validation_nll(
    l: &DMatrix<f64>,
    val: &[(Vec<f64>, DMatrix<f64>)],
    data: &Dataset,
    head: &LikelihoodHead,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let per_item: Vec<f64> = val
        .par_iter()
        .enumerate()
        .map(|(i, (g, f))| {
            let w = solve_lower(l, &f.transpose())?;
            let pred = PredictiveGaussian::new(g.clone(), w.transpose() * &w)?;
            match (head, data.target(i)) {
                (LikelihoodHead::Categorical, crate::data::Target::Class(y)) => {
                    let p = pred.mc_softmax(samples, seed.wrapping_add(i as u64))?;
                    Ok(-p[y].max(f64::MIN_POSITIVE).ln())
                }
                (LikelihoodHead::Gaussian { noise_var }, crate::data::Target::Real(t)) => {
                    gaussian_nll(&pred, t, *noise_var)
                }
                _ => Err(EllaError::InvalidArgument("validation targets do not match the likelihood head".into())),
            }
        })
        .collect::<Result<_>>()?;
    Ok(per_item.iter().sum::<f64>() / per_item.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{ArchDescriptor, Layer};
    use crate::data::Targets;
    use crate::nystrom::build_sketch;

    fn linear_model() -> (FlatParams, Arc<NystromSketch>) {
        let arch = Arc::new(ArchDescriptor::new(vec![3], vec![Layer::Dense { inputs: 3, outputs: 1 }]).unwrap());
        let params = FlatParams::new(arch, vec![0.5, -1.0, 2.0, 0.1]).unwrap();
        let sketch = build_sketch(&DMatrix::identity(3, 4), 3, 1e-10).unwrap();
        (params, Arc::new(sketch))
    }

    #[test]
    fn empty_accumulation_gives_prior() {
        let (params, sketch) = linear_model();
        let g = precision_from_features(&[], 3, 2.0);
        assert_eq!(g, DMatrix::identity(3, 3) * 0.5);
        let post = EllaPosterior::from_precision(sketch.clone(), &g, 2.0, LikelihoodHead::Categorical, 0).unwrap();
        let x = [1.0, -2.0, 0.5];
        let (_, f) = phi(&params, &sketch, &x).unwrap();
        let cov = post.predict_f(&params, &x).unwrap().covariance;
        let expect = (&f * f.transpose()) * 2.0;
        assert!((cov - expect).abs().max() < 1e-12);
    }

    #[test]
    fn kappa_diagonal_is_bit_equal_to_predict_f() {
        let (params, sketch) = linear_model();
        let ds = Dataset::new(
            vec![vec![1.0, 0.0, 2.0], vec![-1.0, 1.0, 0.5]],
            vec![3],
            Targets::Real(vec![vec![0.3], vec![-0.2]]),
            1,
            "test",
        )
        .unwrap();
        let post = EllaPosterior::fit(sketch, &params, &ds, LikelihoodHead::gaussian(1.0).unwrap(), 1.5, None).unwrap();
        let x = [0.2, 0.7, -1.1];
        let y = [1.0, 0.0, 0.3];
        assert_eq!(post.kappa_ella(&params, &x, &x).unwrap(), post.predict_f(&params, &x).unwrap().covariance);
        let a = post.kappa_ella(&params, &x, &y).unwrap();
        let b = post.kappa_ella(&params, &y, &x).unwrap();
        assert!((a - b.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn single_datum_precision() {
        let (params, sketch) = linear_model();
        let ds = Dataset::new(vec![vec![1.0, 2.0, -1.0]], vec![3], Targets::Real(vec![vec![0.0]]), 1, "t").unwrap();
        let post = EllaPosterior::fit(sketch.clone(), &params, &ds, LikelihoodHead::gaussian(1.0).unwrap(), 0.5, None).unwrap();
        let (_, f) = phi(&params, &sketch, &ds.inputs[0]).unwrap();
        let dense = f.transpose() * &f + DMatrix::identity(3, 3) * 2.0;
        assert!((post.precision() - dense).abs().max() < 1e-12);
    }

    #[test]
    fn zero_covariance_returns_softmax() {
        let p = PredictiveGaussian::new(vec![0.3, -1.0, 2.0], DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(p.mc_softmax(10, 0).unwrap(), softmax(&[0.3, -1.0, 2.0]));
    }

    #[test]
    fn symmetric_two_class_probs() {
        let s = 4096;
        let p = PredictiveGaussian::new(vec![0.0, 0.0], DMatrix::identity(2, 2) * 2.0).unwrap();
        let probs = p.mc_softmax(s, 3).unwrap();
        assert!((probs[0] - 0.5).abs() < 3.0 / (s as f64).sqrt());
        assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn posterior_file_roundtrip() {
        let (params, sketch) = linear_model();
        let g = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let post = EllaPosterior::from_precision(sketch.clone(), &g, 1.0, LikelihoodHead::Categorical, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.post");
        post.save(&path, Some("abc".into()), serde_json::json!({"seed": 1})).unwrap();
        let (back, h) = EllaPosterior::load(&path, sketch).unwrap();
        assert_eq!(back.g_chol(), post.g_chol());
        assert_eq!(h.items_used, 7);
        assert_eq!(
            back.predict_f(&params, &[1.0, 1.0, 1.0]).unwrap(),
            post.predict_f(&params, &[1.0, 1.0, 1.0]).unwrap()
        );
    }
}
