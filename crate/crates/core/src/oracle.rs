//! Dense exact-LLA references for small models.
//!
//! Everything here materializes Jacobians (`NC × P`) and, where needed,
//! `P × P` or `NC × NC` matrices, so sizes are gated. The likelihood
//! Hessian of a categorical head is singular, so kernel-space formulas use
//! the symmetric square root `R = Λ^{1/2}`:
//! `Σ = σ₀²(I − J_XᵀR[I/σ₀² + R J_X J_Xᵀ R]⁻¹R J_X)`, which coincides with
//! the `Λ⁻¹` form whenever `Λ` is invertible.

use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward, jacobian, Activation, ArchDescriptor, FlatParams};
use crate::data::{Dataset, Targets};
use crate::error::{EllaError, Result};
use crate::likelihood::{lambda_hessian, LikelihoodHead};
use crate::linalg::{cholesky, cholesky_with_jitter, psd_sqrt, spectral_norm_sym, sym_eigen_desc, sym_eigenvalues_desc, symmetrize};
use crate::nystrom::{sample_landmarks, landmark_jacobian, NystromSketch};
use crate::posterior::{EllaPosterior, PredictiveGaussian};

pub const MAX_ORACLE_PARAMS: usize = 100_000;
pub const MAX_ORACLE_ROWS: usize = 5_000;
/// Largest `P` for which `P × P` matrices are formed.
pub const MAX_DENSE_PARAM_MATRIX: usize = 6_000;
pub const PROJECTOR_RANK_CUTOFF: f64 = 1e-10;
pub const KL_JITTER: f64 = 1e-12;
pub const THM0_SLACK: f64 = 1e-8;

fn gate(rows: usize, p: usize) -> Result<()> {
    if p > MAX_ORACLE_PARAMS || rows > MAX_ORACLE_ROWS {
        return Err(EllaError::OracleLimit(format!(
            "dense oracle limited to P <= {MAX_ORACLE_PARAMS} and NC <= {MAX_ORACLE_ROWS}, got P={p}, NC={rows}"
        )));
    }
    Ok(())
}

fn gate_square(p: usize) -> Result<()> {
    if p > MAX_DENSE_PARAM_MATRIX {
        return Err(EllaError::OracleLimit(format!(
            "P x P matrices limited to P <= {MAX_DENSE_PARAM_MATRIX}, got {p}"
        )));
    }
    Ok(())
}

/// Stacked Jacobian `J_X ∈ R^{NC×P}`; row `i·C + c` is `∇θ g_c(x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseJacobian {
    matrix: DMatrix<f64>,
    classes: usize,
}

impl DenseJacobian {
    pub fn compute(params: &FlatParams, inputs: &[Vec<f64>]) -> Result<Self> {
        let c = params.arch().num_outputs();
        let p = params.len();
        gate(inputs.len() * c, p)?;
        let blocks: Vec<DMatrix<f64>> = inputs.par_iter().map(|x| jacobian(params, x)).collect::<Result<_>>()?;
        Ok(Self { matrix: stack_rows(&blocks, p), classes: c })
    }

    pub fn from_matrix(matrix: DMatrix<f64>, classes: usize) -> Result<Self> {
        if classes == 0 || matrix.nrows() % classes != 0 {
            return Err(EllaError::Shape(format!("{} rows is not a multiple of C={classes}", matrix.nrows())));
        }
        gate(matrix.nrows(), matrix.ncols())?;
        Ok(Self { matrix, classes })
    }

    pub fn row_index(&self, datum: usize, class: usize) -> usize {
        datum * self.classes + class
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn num_data(&self) -> usize {
        self.matrix.nrows() / self.classes
    }

    /// `J(x_i) ∈ R^{C×P}`.
    pub fn block(&self, datum: usize) -> DMatrix<f64> {
        self.matrix.rows(datum * self.classes, self.classes).into_owned()
    }
}

fn stack_rows(blocks: &[DMatrix<f64>], p: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, p);
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut o = 0;
    for b in blocks {
        out.view_mut((o, o), (b.nrows(), b.ncols())).copy_from(b);
        o += b.nrows();
    }
    out
}

/// `Λ(x_i)` at the network outputs of every training input.
pub fn lambda_blocks(params: &FlatParams, inputs: &[Vec<f64>], head: &LikelihoodHead) -> Result<Vec<DMatrix<f64>>> {
    inputs
        .par_iter()
        .map(|x| lambda_hessian(&forward(params, x)?, head))
        .collect()
}

fn check_prior(prior_var: f64) -> Result<()> {
    if !(prior_var > 0.0) || !prior_var.is_finite() {
        return Err(EllaError::InvalidArgument(format!("prior variance must be positive, got {prior_var}")));
    }
    Ok(())
}

/// `JᵀΛJ` for a block-diagonal `Λ`.
pub fn ggn(j_x: &DMatrix<f64>, lambda: &DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&(j_x.transpose() * lambda * j_x))
}

/// Exact LLA over a fixed training set.
#[derive(Clone, Debug)]
pub struct LlaOracle {
    j_x: DMatrix<f64>,
    lambda: DMatrix<f64>,
    lambda_sqrt: DMatrix<f64>,
    prior_var: f64,
    classes: usize,
    columns: Option<Range<usize>>,
    /// Cholesky of `I/σ₀² + R J_X J_Xᵀ R`; absent without data.
    inner: Option<Cholesky<f64, Dyn>>,
    /// Diagonal of `[diag(J_XᵀΛJ_X) + I/σ₀²]⁻¹`.
    diag_sigma: DVector<f64>,
}

impl LlaOracle {
    pub fn new(j_x: DMatrix<f64>, lambda_blocks: &[DMatrix<f64>], prior_var: f64, classes: usize) -> Result<Self> {
        check_prior(prior_var)?;
        gate(j_x.nrows(), j_x.ncols())?;
        if classes == 0 || lambda_blocks.len() * classes != j_x.nrows() || lambda_blocks.iter().any(|b| b.nrows() != classes) {
            return Err(EllaError::Shape(format!(
                "{} Jacobian rows do not match {} Hessian blocks of size {classes}",
                j_x.nrows(),
                lambda_blocks.len()
            )));
        }
        let sqrt_blocks: Vec<DMatrix<f64>> = lambda_blocks.iter().map(psd_sqrt).collect();
        let lambda = block_diag(lambda_blocks);
        let lambda_sqrt = block_diag(&sqrt_blocks);
        let inner = if j_x.nrows() == 0 {
            None
        } else {
            let rj = &lambda_sqrt * &j_x;
            let mut m = symmetrize(&(&rj * rj.transpose()));
            for i in 0..m.nrows() {
                m[(i, i)] += 1.0 / prior_var;
            }
            Some(cholesky(&m, "LLA kernel system")?)
        };
        let lj = &lambda * &j_x;
        let diag_sigma = DVector::from_iterator(
            j_x.ncols(),
            (0..j_x.ncols()).map(|p| 1.0 / (j_x.column(p).dot(&lj.column(p)) + 1.0 / prior_var)),
        );
        Ok(Self { j_x, lambda, lambda_sqrt, prior_var, classes, columns: None, inner, diag_sigma })
    }

    pub fn from_model(params: &FlatParams, dataset: &Dataset, head: &LikelihoodHead, prior_var: f64) -> Result<Self> {
        let j = DenseJacobian::compute(params, &dataset.inputs)?;
        let lam = lambda_blocks(params, &dataset.inputs, head)?;
        Self::new(j.into_matrix(), &lam, prior_var, params.arch().num_outputs())
    }

    /// Exact LLA restricted to parameters in `cols` (e.g. the last layer).
    pub fn restricted(&self, cols: Range<usize>) -> Result<Self> {
        if cols.end > self.j_x.ncols() || cols.is_empty() {
            return Err(EllaError::OutOfRange { what: "parameter range end", index: cols.end, len: self.j_x.ncols() });
        }
        let blocks: Vec<DMatrix<f64>> = (0..self.j_x.nrows() / self.classes)
            .map(|i| self.lambda.view((i * self.classes, i * self.classes), (self.classes, self.classes)).into_owned())
            .collect();
        let sub = self.j_x.columns(cols.start, cols.len()).into_owned();
        let mut o = Self::new(sub, &blocks, self.prior_var, self.classes)?;
        o.columns = Some(cols);
        Ok(o)
    }

    pub fn last_layer(&self, arch: &ArchDescriptor) -> Result<Self> {
        let range = arch
            .last_dense_range()
            .ok_or_else(|| EllaError::Arch("network has no dense layer".into()))?;
        self.restricted(range)
    }

    pub fn j_x(&self) -> &DMatrix<f64> {
        &self.j_x
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn prior_var(&self) -> f64 {
        self.prior_var
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn cols(&self, j: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.columns {
            Some(r) => j.columns(r.start, r.len()).into_owned(),
            None => j.clone(),
        }
    }

    /// Kernel route: `σ₀²(κ(x,x′) − κ(x,X)R[I/σ₀² + Rκ(X,X)R]⁻¹Rκ(X,x′))`.
    pub fn kappa_lla_exact(&self, j_a: &DMatrix<f64>, j_b: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, b) = (self.cols(j_a), self.cols(j_b));
        let prior = &a * b.transpose();
        let Some(inner) = &self.inner else {
            return prior * self.prior_var;
        };
        let ka = &self.lambda_sqrt * (&self.j_x * a.transpose());
        let kb = &self.lambda_sqrt * (&self.j_x * b.transpose());
        (prior - ka.transpose() * inner.solve(&kb)) * self.prior_var
    }

    /// `Σ = (J_XᵀΛJ_X + I/σ₀²)⁻¹` by direct `P × P` inversion.
    pub fn sigma(&self) -> Result<DMatrix<f64>> {
        let p = self.j_x.ncols();
        gate_square(p)?;
        let mut prec = ggn(&self.j_x, &self.lambda);
        for i in 0..p {
            prec[(i, i)] += 1.0 / self.prior_var;
        }
        Ok(symmetrize(&cholesky(&prec, "GGN precision")?.inverse()))
    }

    /// `Σ` via the Woodbury identity in kernel space.
    pub fn sigma_woodbury(&self) -> Result<DMatrix<f64>> {
        let p = self.j_x.ncols();
        gate_square(p)?;
        let eye = DMatrix::identity(p, p);
        let Some(inner) = &self.inner else {
            return Ok(eye * self.prior_var);
        };
        let rj = &self.lambda_sqrt * &self.j_x;
        Ok(symmetrize(&((eye - rj.transpose() * inner.solve(&rj)) * self.prior_var)))
    }

    /// The literal `σ₀²(I − Jᵀ[Λ⁻¹/σ₀² + JJᵀ]⁻¹J)`; needs an invertible `Λ`.
    pub fn sigma_woodbury_inverse_form(&self) -> Result<DMatrix<f64>> {
        let p = self.j_x.ncols();
        gate_square(p)?;
        let lam_inv = cholesky(&self.lambda, "likelihood Hessian")?.inverse();
        let m = lam_inv / self.prior_var + &self.j_x * self.j_x.transpose();
        let inner = cholesky(&m, "LLA kernel system")?;
        let eye = DMatrix::identity(p, p);
        Ok(symmetrize(&((eye - self.j_x.transpose() * inner.solve(&self.j_x)) * self.prior_var)))
    }

    /// Primal route `J(x) Σ J(x′)ᵀ` for a precomputed `Σ`.
    pub fn kappa_lla_primal(&self, sigma: &DMatrix<f64>, j_a: &DMatrix<f64>, j_b: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, b) = (self.cols(j_a), self.cols(j_b));
        &a * sigma * b.transpose()
    }

    /// Diagonal-GGN baseline: `J(x) Σ_diag J(x′)ᵀ`.
    pub fn kappa_lla_diag(&self, j_a: &DMatrix<f64>, j_b: &DMatrix<f64>) -> DMatrix<f64> {
        let (a, b) = (self.cols(j_a), self.cols(j_b));
        let mut scaled = b;
        for (p, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.diag_sigma[p];
        }
        a * scaled.transpose()
    }
}

/// Orthonormal basis (columns) of the row space of `j_landmarks`, dropping
/// directions with gram eigenvalue at or below `cutoff·λ₁`.
pub fn landmark_basis(j_landmarks: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    let p = j_landmarks.ncols();
    if j_landmarks.nrows() == 0 {
        return DMatrix::zeros(p, 0);
    }
    let (vals, vecs) = sym_eigen_desc(&symmetrize(&(j_landmarks * j_landmarks.transpose())));
    let top = vals[0];
    let r = if top > 0.0 { vals.iter().take_while(|&&l| l > cutoff * top).count() } else { 0 };
    let mut v = j_landmarks.transpose() * vecs.columns(0, r);
    for (k, mut col) in v.column_iter_mut().enumerate() {
        col /= vals[k].sqrt();
    }
    v
}

/// `P = J̃ᵀ(J̃J̃ᵀ)⁺J̃`, the orthogonal projector onto the landmark row space.
pub fn landmark_projector(j_landmarks: &DMatrix<f64>) -> DMatrix<f64> {
    let v = landmark_basis(j_landmarks, PROJECTOR_RANK_CUTOFF);
    symmetrize(&(&v * v.transpose()))
}

/// `Σ′ = V[VᵀJ_XᵀΛJ_XV + I/σ₀²]⁻¹Vᵀ` with `V` an orthonormal basis of the
/// landmark row space. Equals `J̃ᵀ[J̃J_XᵀΛJ_XJ̃ᵀ + J̃J̃ᵀ/σ₀²]⁻¹J̃` whenever
/// `J̃J̃ᵀ` is invertible, and stays defined when landmarks repeat.
pub fn sigma_prime(j_landmarks: &DMatrix<f64>, j_x: &DMatrix<f64>, lambda: &DMatrix<f64>, prior_var: f64) -> Result<DMatrix<f64>> {
    check_prior(prior_var)?;
    gate_square(j_x.ncols())?;
    let v = landmark_basis(j_landmarks, PROJECTOR_RANK_CUTOFF);
    let jv = j_x * &v;
    let mut inner = symmetrize(&(jv.transpose() * lambda * &jv));
    for i in 0..inner.nrows() {
        inner[(i, i)] += 1.0 / prior_var;
    }
    let solved = cholesky(&inner, "reduced precision")?.solve(&v.transpose());
    Ok(symmetrize(&(&v * solved)))
}

/// The bracketed matrix taken literally, `J̃ᵀ[J̃AJ̃ᵀ + J̃J̃ᵀ/σ₀²]⁻¹J̃` with
/// `A = J_XᵀΛJ_X`. Fails when the landmark gram is singular.
pub fn sigma_prime_literal(j_landmarks: &DMatrix<f64>, j_x: &DMatrix<f64>, lambda: &DMatrix<f64>, prior_var: f64) -> Result<DMatrix<f64>> {
    check_prior(prior_var)?;
    gate_square(j_x.ncols())?;
    let jl_jx = j_landmarks * j_x.transpose();
    let mut m = symmetrize(&(&jl_jx * lambda * jl_jx.transpose()));
    m += symmetrize(&(j_landmarks * j_landmarks.transpose())) / prior_var;
    let solved = cholesky(&m, "landmark system")?.solve(j_landmarks);
    Ok(symmetrize(&(j_landmarks.transpose() * solved)))
}

/// `T + σ₀²(P − I)` with `T = (PAP + I/σ₀²)⁻¹`.
pub fn sigma_prime_split(j_landmarks: &DMatrix<f64>, j_x: &DMatrix<f64>, lambda: &DMatrix<f64>, prior_var: f64) -> Result<DMatrix<f64>> {
    check_prior(prior_var)?;
    let p = j_x.ncols();
    gate_square(p)?;
    let proj = landmark_projector(j_landmarks);
    let a = ggn(j_x, lambda);
    let mut t_inv = symmetrize(&(&proj * a * &proj));
    for i in 0..p {
        t_inv[(i, i)] += 1.0 / prior_var;
    }
    let t = cholesky(&t_inv, "projected precision")?.inverse();
    Ok(symmetrize(&(t + (proj - DMatrix::identity(p, p)) * prior_var)))
}

/// Absolute Nyström error `‖J_X P J_Xᵀ − J_X J_Xᵀ‖` (`P` from the landmarks).
pub fn nystrom_error_abs(j_x: &DMatrix<f64>, j_landmarks: &DMatrix<f64>) -> f64 {
    let v = landmark_basis(j_landmarks, PROJECTOR_RANK_CUTOFF);
    let jv = j_x * v;
    let approx = &jv * jv.transpose();
    spectral_norm_sym(&symmetrize(&(approx - j_x * j_x.transpose())))
}

/// A dense problem for checking the approximation theorems.
#[derive(Clone, Debug)]
pub struct TheoremInstance {
    pub seed: u64,
    pub j_x: DMatrix<f64>,
    pub lambda_blocks: Vec<DMatrix<f64>>,
    pub j_landmarks: DMatrix<f64>,
    pub prior_var: f64,
    pub head: LikelihoodHead,
    pub n: usize,
    pub classes: usize,
}

impl TheoremInstance {
    pub fn num_params(&self) -> usize {
        self.j_x.ncols()
    }

    pub fn m(&self) -> usize {
        self.j_landmarks.nrows()
    }

    pub fn lambda(&self) -> DMatrix<f64> {
        block_diag(&self.lambda_blocks)
    }

    pub fn oracle(&self) -> Result<LlaOracle> {
        LlaOracle::new(self.j_x.clone(), &self.lambda_blocks, self.prior_var, self.classes)
    }
}

/// A random small network (one tanh hidden layer, `P ≤ 60`), `1 ≤ N ≤ 20`
/// standard-normal inputs, `1 ≤ C ≤ 3` outputs, a Gaussian head for `C = 1`
/// and a categorical head otherwise, a log-uniform prior variance in
/// `[1e-3, 10]`, and `1 ≤ M ≤ min(NC, P)` landmarks.
pub fn random_instance(seed: u64) -> Result<TheoremInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = rng.random_range(1..=3usize);
    let d = rng.random_range(1..=3usize);
    let max_h = (60 - c) / (d + 1 + c);
    let h = rng.random_range(1..=max_h.min(10));
    let arch = std::sync::Arc::new(ArchDescriptor::mlp(&[d, h, c], Activation::Tanh)?);
    let params = FlatParams::init(arch, rng.random());
    let scale = rng.random_range(0.5..2.0);
    let params = params.with_values(params.values().iter().map(|v| v * scale).collect())?;
    let n = rng.random_range(1..=20usize);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let (head, targets) = if c == 1 {
        let head = LikelihoodHead::gaussian(rng.random_range(0.1..2.0))?;
        (head, Targets::Real((0..n).map(|_| vec![rng.sample(StandardNormal)]).collect()))
    } else {
        (LikelihoodHead::Categorical, Targets::Labels((0..n).map(|_| rng.random_range(0..c)).collect()))
    };
    let ds = Dataset::new(inputs, vec![d], targets, c, "random-instance")?;
    let prior_var = 10f64.powf(rng.random_range(-3.0..1.0));
    let m = rng.random_range(1..=(n * c).min(params.len()));
    let landmarks = sample_landmarks(&ds, c, m, rng.random())?;
    let j_landmarks = landmark_jacobian(&params, &ds, &landmarks)?;
    let j_x = DenseJacobian::compute(&params, &ds.inputs)?.into_matrix();
    let lambda_blocks = lambda_blocks(&params, &ds.inputs, &head)?;
    Ok(TheoremInstance { seed, j_x, lambda_blocks, j_landmarks, prior_var, head, n, classes: c })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremBoundReport {
    pub seed: u64,
    pub n: usize,
    pub c: usize,
    pub p: usize,
    pub m: usize,
    pub prior_var: f64,
    /// `‖Σ′ − Σ‖`.
    pub e: f64,
    /// `‖J_X P J_Xᵀ − J_X J_Xᵀ‖`.
    pub eps_prime: f64,
    pub c_lambda: f64,
    pub c_kappa: f64,
    pub lambda_m1: f64,
    pub delta: f64,
    pub bound_thm0: f64,
    pub bound_nystrom: f64,
    pub bound_corollary: f64,
    pub holds_thm0: bool,
    pub holds_nystrom: bool,
    pub holds_corollary: bool,
}

/// Evaluate `E ≤ σ₀⁴c_Λε′ + σ₀²` exactly, and the high-probability bounds
/// `ε′ ≤ λ̃_{M+1} + (NC/√M)c_κ(2 + log 1/δ)` and its corollary for `E`.
pub fn check_theorem_bounds(inst: &TheoremInstance, delta: f64) -> Result<TheoremBoundReport> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(EllaError::InvalidArgument(format!("delta must lie in (0, 1], got {delta}")));
    }
    let s = inst.prior_var;
    let oracle = inst.oracle()?;
    let sigma = oracle.sigma()?;
    let lambda = inst.lambda();
    let sp = sigma_prime(&inst.j_landmarks, &inst.j_x, &lambda, s)?;
    let e = spectral_norm_sym(&symmetrize(&(sp - sigma)));
    let eps_prime = nystrom_error_abs(&inst.j_x, &inst.j_landmarks);
    let kernel = symmetrize(&(&inst.j_x * inst.j_x.transpose()));
    let c_kappa = kernel.diagonal().iter().fold(0.0f64, |a, &b| a.max(b));
    let eig = sym_eigenvalues_desc(&kernel);
    let m = inst.m();
    let lambda_m1 = eig.get(m).copied().unwrap_or(0.0).max(0.0);
    let c_lambda = inst.head.c_lambda();
    let nc = (inst.n * inst.classes) as f64;
    let bound_thm0 = s * s * c_lambda * eps_prime + s;
    let bound_nystrom = lambda_m1 + nc / (m as f64).sqrt() * c_kappa * (2.0 + (1.0 / delta).ln());
    let bound_corollary = s * s * c_lambda * bound_nystrom + s;
    Ok(TheoremBoundReport {
        seed: inst.seed,
        n: inst.n,
        c: inst.classes,
        p: inst.num_params(),
        m,
        prior_var: s,
        e,
        eps_prime,
        c_lambda,
        c_kappa,
        lambda_m1,
        delta,
        bound_thm0,
        bound_nystrom,
        bound_corollary,
        holds_thm0: e <= bound_thm0 + THM0_SLACK,
        holds_nystrom: eps_prime <= bound_nystrom,
        holds_corollary: e <= bound_corollary + THM0_SLACK,
    })
}

fn logdet_chol(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `KL(N(μ₁, Σ₁) ‖ N(μ₂, Σ₂))`, with `KL_JITTER·(tr/C)` added to `Σ₂`
/// (and to `Σ₁` only if it is not positive definite).
pub fn kl_gaussian(p: &PredictiveGaussian, q: &PredictiveGaussian) -> Result<f64> {
    let c = p.dim();
    if q.dim() != c {
        return Err(EllaError::Shape(format!("KL between dimensions {c} and {}", q.dim())));
    }
    let jit = |m: &DMatrix<f64>| KL_JITTER * (m.trace() / c as f64).max(f64::MIN_POSITIVE);
    let (cq, _) = cholesky_with_jitter(&q.covariance, jit(&q.covariance), 3)?;
    let cp = match Cholesky::new(symmetrize(&p.covariance)) {
        Some(ch) => ch,
        None => cholesky_with_jitter(&p.covariance, jit(&p.covariance), 3)?.0,
    };
    let trace = cq.solve(&p.covariance).trace();
    let diff = DVector::from_iterator(c, q.mean.iter().zip(&p.mean).map(|(a, b)| a - b));
    let maha = diff.dot(&cq.solve(&diff));
    let kl = 0.5 * (trace + maha - c as f64 + logdet_chol(&cq) - logdet_chol(&cp));
    Ok(kl.max(0.0))
}

/// Mean over `inputs` of `‖κ_ELLA(x,x) − κ_LLA(x,x)‖ / ‖κ_LLA(x,x)‖`.
pub fn epsilon_ella(post: &EllaPosterior, params: &FlatParams, oracle: &LlaOracle, inputs: &[Vec<f64>]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(EllaError::InvalidArgument("epsilon_ella needs at least one input".into()));
    }
    let errs: Vec<f64> = inputs
        .par_iter()
        .map(|x| {
            let j = jacobian(params, x)?;
            let exact = oracle.kappa_lla_exact(&j, &j);
            let approx = post.predict_f(params, x)?.covariance;
            Ok(spectral_norm_sym(&symmetrize(&(approx - &exact))) / spectral_norm_sym(&exact))
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// `φ(x)` assembled from the Nyström eigenfunctions:
/// `φ(x)[i,k] = ψ̂_k(x,i)√μ_k` with `ψ̂_k(x,i) = (√M/λ_k)Σ_m u_k^{(m)} κ((x,i),(x_m,i_m))`
/// and `μ_k = λ_k/M`. Needs the landmark Jacobian and eigenvectors.
pub fn phi_via_eigenfunctions(params: &FlatParams, sketch: &NystromSketch, x: &[f64]) -> Result<DMatrix<f64>> {
    let (Some(jl), Some(u)) = (&sketch.landmark_jacobian, &sketch.eigenvectors) else {
        return Err(EllaError::InvalidArgument("sketch lacks landmark Jacobian or eigenvectors".into()));
    };
    let m = sketch.m as f64;
    let kx = jacobian(params, x)? * jl.transpose(); // C × M kernel values
    let mut out = DMatrix::zeros(kx.nrows(), sketch.k());
    for k in 0..sketch.k() {
        let lam = sketch.eigenvalues[k];
        let psi = (&kx * u.column(k)) * (m.sqrt() / lam);
        out.set_column(k, &(psi * (lam / m).sqrt()));
    }
    Ok(out)
}
