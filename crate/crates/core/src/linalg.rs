//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{EllaError, Result};

pub const POWER_ITER_TOL: f64 = 1e-10;
pub const POWER_ITER_MAX: usize = 10_000;

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = a.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(a.nrows(), n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sym_eigenvalues_desc(a: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

/// Spectral norm of a symmetric matrix, `max |λ|`.
pub fn spectral_norm_sym(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.symmetric_eigenvalues().iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Spectral norm of an arbitrary matrix by power iteration on `AᵀA`.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let n = a.ncols();
    // deterministic start with no exact symmetry that could align with a null space
    let mut v = DVector::from_fn(n, |i, _| 1.0 + 0.1 * ((i * 7919 % 97) as f64) / 97.0);
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let av = a * &v;
        let w = a.transpose() * &av;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let next = av.norm();
        v = w / nw;
        if (next - sigma).abs() <= POWER_ITER_TOL * next.max(f64::MIN_POSITIVE) {
            return next;
        }
        sigma = next;
    }
    sigma
}

/// Symmetric PSD square root by eigendecomposition; negative round-off
/// eigenvalues are clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    symmetrize(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

pub fn min_eigenvalue_sym(a: &DMatrix<f64>) -> f64 {
    a.symmetric_eigenvalues().iter().fold(f64::INFINITY, |m, v| m.min(*v))
}

pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(symmetrize(a)).ok_or_else(|| EllaError::Linalg(format!("{what} is not positive definite")))
}

/// Cholesky of `A + jitter·I`, multiplying the jitter by 10 after every
/// failure for at most `escalations` retries.
pub fn cholesky_with_jitter(
    a: &DMatrix<f64>,
    initial_jitter: f64,
    escalations: usize,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let sym = symmetrize(a);
    let mut jitter = initial_jitter;
    for _ in 0..=escalations {
        let mut m = sym.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = Cholesky::new(m) {
            return Ok((ch, jitter));
        }
        jitter *= 10.0;
    }
    Err(EllaError::Linalg(format!(
        "cholesky failed after jitter escalation to {:e}",
        jitter / 10.0
    )))
}

/// Relative error `‖a − b‖₂ / ‖b‖₂` for symmetric matrices.
pub fn rel_err_sym(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let denom = spectral_norm_sym(b);
    let num = spectral_norm_sym(&symmetrize(&(a - b)));
    if denom == 0.0 {
        num
    } else {
        num / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_iteration_matches_svd() {
        let a = DMatrix::from_fn(7, 4, |i, j| ((i * 3 + j * 5) % 11) as f64 - 4.5);
        let svd = a.clone().svd(false, false);
        let top = svd.singular_values.max();
        assert!((spectral_norm(&a) - top).abs() < 1e-8 * top);
    }

    #[test]
    fn eigen_sorted_descending() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, -1.0]);
        let (vals, vecs) = sym_eigen_desc(&a);
        assert_eq!(vals, vec![5.0, 2.0, -1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
        assert_eq!(spectral_norm_sym(&a), 5.0);
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let b = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 0.5, -1.0, 0.3, 2.0]);
        let a = &b * b.transpose();
        let r = psd_sqrt(&a);
        assert!((&r * &r - &a).abs().max() < 1e-12);
    }

    #[test]
    fn jitter_escalates() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (_, used) = cholesky_with_jitter(&a, 1e-12, 3).unwrap();
        assert!(used >= 1e-12);
        let neg = DMatrix::from_row_slice(1, 1, &[-1.0]);
        assert!(cholesky_with_jitter(&neg, 1e-10, 3).is_err());
    }
}
