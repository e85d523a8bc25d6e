//! Nyström sketch of the scalar-valued NTK `κ((x,i),(x′,i′)) = J(x,i)J(x′,i′)ᵀ`.
//!
//! Landmarks `(x_m, i_m)` are drawn i.i.d. from the data distribution times
//! a uniform distribution over output indices. The landmark Jacobian
//! `J̃ ∈ R^{M×P}` yields the gram `J̃J̃ᵀ`, whose top-K eigenpairs `(λ_k, u_k)`
//! define directions `v_k = J̃ᵀu_k/√λ_k`. The feature map is then
//! `φ(x)[:, k] = J(x)·v_k`, one forward-mode pass per direction.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_row, jvp, FlatParams};
use crate::data::Dataset;
use crate::error::{EllaError, Result};
use crate::fileio;
use crate::linalg::{cholesky_with_jitter, spectral_norm_sym, sym_eigen_desc, symmetrize};

pub const DEFAULT_RANK_CUTOFF: f64 = 1e-10;
pub const DEFAULT_NYSTROM_JITTER: f64 = 1e-10;
pub const SKETCH_FORMAT: &str = "ella-sketch";
pub const SKETCH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmark {
    pub datum: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub entries: Vec<Landmark>,
    pub seed: u64,
}

impl LandmarkSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Every `(datum, class)` pair, in datum-major order.
    pub fn exhaustive(n: usize, classes: usize) -> Self {
        let entries = (0..n)
            .flat_map(|datum| (0..classes).map(move |class| Landmark { datum, class }))
            .collect();
        Self { entries, seed: 0 }
    }
}

/// `M` i.i.d. draws, with replacement, from uniform-over-data × uniform-over-classes.
pub fn sample_landmarks(dataset: &Dataset, classes: usize, m: usize, seed: u64) -> Result<LandmarkSet> {
    if dataset.is_empty() {
        return Err(EllaError::InvalidArgument("cannot sample landmarks from an empty dataset".into()));
    }
    if m == 0 || classes == 0 {
        return Err(EllaError::InvalidArgument("M and C must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..m)
        .map(|_| Landmark {
            datum: rng.random_range(0..dataset.len()),
            class: rng.random_range(0..classes),
        })
        .collect();
    Ok(LandmarkSet { entries, seed })
}

/// `J̃ ∈ R^{M×P}` with row `m = J(x_m, i_m)`.
pub fn landmark_jacobian(params: &FlatParams, dataset: &Dataset, landmarks: &LandmarkSet) -> Result<DMatrix<f64>> {
    for lm in &landmarks.entries {
        if lm.datum >= dataset.len() {
            return Err(EllaError::OutOfRange {
                what: "landmark datum",
                index: lm.datum,
                len: dataset.len(),
            });
        }
    }
    let rows: Vec<Vec<f64>> = landmarks
        .entries
        .par_iter()
        .map(|lm| grad_row(params, &dataset.inputs[lm.datum], lm.class))
        .collect::<Result<_>>()?;
    let p = params.len();
    Ok(DMatrix::from_fn(rows.len(), p, |r, c| rows[r][c]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NystromSketch {
    /// `λ_1 ≥ … ≥ λ_K > cutoff·λ_1`.
    pub eigenvalues: Vec<f64>,
    /// `u_k` as columns (`M × K`); absent when loaded from disk.
    pub eigenvectors: Option<DMatrix<f64>>,
    /// `v_k` as rows (`K × P`).
    pub directions: DMatrix<f64>,
    pub m: usize,
    pub requested_k: usize,
    pub rank_cutoff: f64,
    pub seed: Option<u64>,
    pub arch_hash: Option<String>,
    /// Retained only for oracle checks.
    pub landmark_jacobian: Option<DMatrix<f64>>,
}

impl NystromSketch {
    pub fn k(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn num_params(&self) -> usize {
        self.directions.ncols()
    }

    pub fn was_truncated(&self) -> bool {
        self.k() < self.requested_k
    }

    pub fn direction(&self, k: usize) -> Vec<f64> {
        self.directions.row(k).iter().copied().collect()
    }

    /// Record landmark seed and architecture, for persistence.
    pub fn with_provenance(mut self, seed: u64, params: &FlatParams) -> Self {
        self.seed = Some(seed);
        self.arch_hash = Some(params.arch().hash());
        self
    }

    pub fn drop_landmark_jacobian(mut self) -> Self {
        self.landmark_jacobian = None;
        self
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = SketchHeader {
            format: SKETCH_FORMAT.into(),
            version: SKETCH_VERSION,
            m: self.m,
            k: self.k(),
            requested_k: self.requested_k,
            seed: self.seed,
            arch_hash: self.arch_hash.clone(),
            rank_cutoff: self.rank_cutoff,
            num_params: self.num_params(),
            eigenvalues: self.eigenvalues.clone(),
        };
        let payload: Vec<f64> = (0..self.k())
            .flat_map(|k| self.directions.row(k).iter().copied().collect::<Vec<_>>())
            .collect();
        fileio::save(path, &header, &payload)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (h, payload): (SketchHeader, Vec<f64>) = fileio::load(path)?;
        fileio::check_format(&h.format, SKETCH_FORMAT, h.version, SKETCH_VERSION)?;
        if h.eigenvalues.len() != h.k || payload.len() != h.k * h.num_params {
            return Err(EllaError::Format(format!(
                "sketch declares K={} and P={}, payload holds {} doubles",
                h.k,
                h.num_params,
                payload.len()
            )));
        }
        Ok(Self {
            eigenvalues: h.eigenvalues,
            eigenvectors: None,
            directions: DMatrix::from_row_slice(h.k, h.num_params, &payload),
            m: h.m,
            requested_k: h.requested_k,
            rank_cutoff: h.rank_cutoff,
            seed: h.seed,
            arch_hash: h.arch_hash,
            landmark_jacobian: None,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SketchHeader {
    format: String,
    version: u32,
    m: usize,
    k: usize,
    requested_k: usize,
    seed: Option<u64>,
    arch_hash: Option<String>,
    rank_cutoff: f64,
    num_params: usize,
    eigenvalues: Vec<f64>,
}

/// Flip each column so its first non-negligible entry is positive.
fn sign_normalize(u: &mut DMatrix<f64>) {
    for mut col in u.column_iter_mut() {
        let max = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12 * max).copied() {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Top-K eigenpairs of `J̃J̃ᵀ` and the directions `v_k = J̃ᵀu_k/√λ_k`.
/// Eigenvalues at or below `rank_cutoff·λ_1` are discarded, truncating K.
pub fn build_sketch(landmark_jac: &DMatrix<f64>, k: usize, rank_cutoff: f64) -> Result<NystromSketch> {
    let m = landmark_jac.nrows();
    if k == 0 || k > m {
        return Err(EllaError::InvalidArgument(format!("need 1 <= K <= M, got K={k}, M={m}")));
    }
    let gram = symmetrize(&(landmark_jac * landmark_jac.transpose()));
    let (values, vectors) = sym_eigen_desc(&gram);
    let top = values[0];
    if !(top > 0.0) {
        return Err(EllaError::RankZero(top));
    }
    let keep = values.iter().take(k).take_while(|&&l| l > rank_cutoff * top).count();
    if keep < k {
        log::warn!("nystrom: only {keep} of {k} eigenvalues exceed the rank cutoff; K truncated");
    }
    let mut u = vectors.columns(0, keep).into_owned();
    sign_normalize(&mut u);
    let lambdas: Vec<f64> = values[..keep].to_vec();
    let scale = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        keep,
        lambdas.iter().map(|l| 1.0 / l.sqrt()),
    ));
    // (J̃ᵀ U Λ^{-1/2})ᵀ = Λ^{-1/2} Uᵀ J̃
    let directions = scale * u.transpose() * landmark_jac;
    Ok(NystromSketch {
        eigenvalues: lambdas,
        eigenvectors: Some(u),
        directions,
        m,
        requested_k: k,
        rank_cutoff,
        seed: None,
        arch_hash: None,
        landmark_jacobian: Some(landmark_jac.clone()),
    })
}

/// Sample landmarks, build their Jacobian and the sketch in one call.
pub fn sketch_from_data(
    params: &FlatParams,
    dataset: &Dataset,
    m: usize,
    k: usize,
    seed: u64,
    rank_cutoff: f64,
) -> Result<NystromSketch> {
    let landmarks = sample_landmarks(dataset, params.arch().num_outputs(), m, seed)?;
    let jac = landmark_jacobian(params, dataset, &landmarks)?;
    Ok(build_sketch(&jac, k, rank_cutoff)?.with_provenance(seed, params))
}

/// `(g(x), φ(x))` with `φ(x) ∈ R^{C×K}`, using exactly K forward-mode passes.
pub fn phi(params: &FlatParams, sketch: &NystromSketch, x: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if sketch.num_params() != params.len() {
        return Err(EllaError::Shape(format!(
            "sketch built for {} parameters, model has {}",
            sketch.num_params(),
            params.len()
        )));
    }
    let c = params.arch().num_outputs();
    let mut features = DMatrix::zeros(c, sketch.k());
    let mut g = Vec::new();
    for k in 0..sketch.k() {
        let out = jvp(params, x, &sketch.direction(k))?;
        for i in 0..c {
            features[(i, k)] = out.tangent[i];
        }
        if k == 0 {
            g = out.primal;
        }
    }
    Ok((g, features))
}

/// Stack `φ(x_i)` for a dataset into an `NC × K` matrix (datum-major rows).
pub fn phi_stack(params: &FlatParams, sketch: &NystromSketch, inputs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let c = params.arch().num_outputs();
    let blocks: Vec<DMatrix<f64>> = inputs
        .par_iter()
        .map(|x| phi(params, sketch, x).map(|(_, f)| f))
        .collect::<Result<_>>()?;
    let mut out = DMatrix::zeros(inputs.len() * c, sketch.k());
    for (i, b) in blocks.iter().enumerate() {
        out.view_mut((i * c, 0), (c, sketch.k())).copy_from(b);
    }
    Ok(out)
}

/// Relative spectral-norm error of the landmark-based Nyström reconstruction,
/// `‖J_X J̃ᵀ(J̃J̃ᵀ)⁻¹J̃ J_Xᵀ − J_X J_Xᵀ‖ / ‖J_X J_Xᵀ‖`. The inverse uses a
/// Cholesky factor of `J̃J̃ᵀ + jitter·(tr/M)·I`.
pub fn nystrom_error(j_train: &DMatrix<f64>, j_landmarks: &DMatrix<f64>, jitter: f64) -> Result<f64> {
    let exact = symmetrize(&(j_train * j_train.transpose()));
    let approx = nystrom_reconstruction(j_train, j_landmarks, jitter)?;
    let denom = spectral_norm_sym(&exact);
    if denom == 0.0 {
        return Err(EllaError::RankZero(0.0));
    }
    Ok(spectral_norm_sym(&(approx - exact)) / denom)
}

/// `J_X J̃ᵀ(J̃J̃ᵀ + jitter·I)⁻¹J̃ J_Xᵀ`.
pub fn nystrom_reconstruction(j_train: &DMatrix<f64>, j_landmarks: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if j_train.ncols() != j_landmarks.ncols() {
        return Err(EllaError::Shape("Jacobians have different parameter counts".into()));
    }
    let kmm = symmetrize(&(j_landmarks * j_landmarks.transpose()));
    let m = kmm.nrows().max(1);
    let scale = kmm.trace() / m as f64;
    let (chol, _) = cholesky_with_jitter(&kmm, jitter * scale, 0)
        .map_err(|_| EllaError::Linalg("landmark gram singular after jitter".into()))?;
    let cross = j_landmarks * j_train.transpose(); // M × NC
    let b = chol
        .l()
        .solve_lower_triangular(&cross)
        .ok_or_else(|| EllaError::Linalg("triangular solve failed".into()))?;
    Ok(symmetrize(&(b.transpose() * b)))
}

/// Relative error of the rank-K sketch, `‖Φ_XΦ_Xᵀ − J_XJ_Xᵀ‖ / ‖J_XJ_Xᵀ‖`
/// with `Φ_X = J_X [v_1 … v_K]`.
pub fn nystrom_error_sketch(j_train: &DMatrix<f64>, sketch: &NystromSketch) -> Result<f64> {
    if j_train.ncols() != sketch.num_params() {
        return Err(EllaError::Shape("Jacobian and sketch have different parameter counts".into()));
    }
    let phi_x = j_train * sketch.directions.transpose();
    let exact = symmetrize(&(j_train * j_train.transpose()));
    let denom = spectral_norm_sym(&exact);
    if denom == 0.0 {
        return Err(EllaError::RankZero(0.0));
    }
    Ok(spectral_norm_sym(&symmetrize(&(&phi_x * phi_x.transpose() - exact))) / denom)
}

/// Convenience wrapper holding the sketch behind an `Arc` for sharing.
pub fn shared(sketch: NystromSketch) -> Arc<NystromSketch> {
    Arc::new(sketch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_sine_regression;

    #[test]
    fn single_landmark_single_class() {
        let ds = gen_sine_regression(4, 0);
        let set = sample_landmarks(&ds, 1, 1, 7).unwrap();
        assert_eq!(set.entries[0].class, 0);
        let one = gen_sine_regression(1, 0);
        let set = sample_landmarks(&one, 3, 5, 7).unwrap();
        assert!(set.entries.iter().all(|l| l.datum == 0));
        assert_eq!(sample_landmarks(&ds, 3, 9, 11).unwrap(), sample_landmarks(&ds, 3, 9, 11).unwrap());
    }

    #[test]
    fn identity_gram() {
        let j = DMatrix::<f64>::identity(2, 2);
        let s = build_sketch(&j, 2, DEFAULT_RANK_CUTOFF).unwrap();
        assert_eq!(s.eigenvalues, vec![1.0, 1.0]);
        let vvt = s.directions.transpose() * &s.directions;
        assert!((vvt - DMatrix::<f64>::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn closed_form_rank_one() {
        let j = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]);
        let s = build_sketch(&j, 1, DEFAULT_RANK_CUTOFF).unwrap();
        assert_eq!(s.eigenvalues, vec![4.0]);
        assert_eq!(s.direction(0), vec![1.0, 0.0]);
        // K=2 truncates because the second eigenvalue is zero
        let s2 = build_sketch(&j, 2, DEFAULT_RANK_CUTOFF).unwrap();
        assert_eq!(s2.k(), 1);
        assert!(s2.was_truncated());
    }

    #[test]
    fn rank_zero_is_an_error() {
        let j = DMatrix::<f64>::zeros(3, 4);
        assert!(matches!(build_sketch(&j, 2, DEFAULT_RANK_CUTOFF), Err(EllaError::RankZero(_))));
        assert!(build_sketch(&DMatrix::<f64>::identity(2, 2), 3, DEFAULT_RANK_CUTOFF).is_err());
    }

    #[test]
    fn sketch_file_roundtrip() {
        let j = DMatrix::from_fn(4, 6, |r, c| ((r * 5 + c * 3) % 7) as f64 - 3.0);
        let mut s = build_sketch(&j, 3, DEFAULT_RANK_CUTOFF).unwrap();
        s.seed = Some(4);
        s.arch_hash = Some("abc".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.sketch");
        s.save(&path).unwrap();
        let back = NystromSketch::load(&path).unwrap();
        assert_eq!(back.directions, s.directions);
        assert_eq!(back.eigenvalues, s.eigenvalues);
        assert_eq!(back.seed, Some(4));
        let bytes = std::fs::read(&path).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 3 * 6 * 8);
    }
}
