use std::sync::Arc;

use ella_core::autodiff::{jacobian, Activation, ArchDescriptor, FlatParams};
use ella_core::data::gen_sine_regression;
use ella_core::likelihood::LikelihoodHead;
use ella_core::linalg::rel_err_sym;
use ella_core::oracle::{
    check_theorem_bounds, kl_gaussian, random_instance, sigma_prime, sigma_prime_literal, sigma_prime_split, LlaOracle,
};
use ella_core::posterior::PredictiveGaussian;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn covariance_routes_agree_on_random_instances() {
    for seed in 0..20 {
        let inst = random_instance(seed).unwrap();
        let o = inst.oracle().unwrap();
        let direct = o.sigma().unwrap();
        assert!(rel_err_sym(&direct, &o.sigma_woodbury().unwrap()) < 1e-8, "seed {seed}");
        let j_a = inst.j_x.rows(0, inst.classes).into_owned();
        let primal = o.kappa_lla_primal(&direct, &j_a, &j_a);
        assert!(rel_err_sym(&primal, &o.kappa_lla_exact(&j_a, &j_a)) < 1e-8, "seed {seed}");
    }
}

#[test]
fn inverse_form_agrees_for_gaussian_heads() {
    let mut seen = 0;
    for seed in 0..40 {
        let inst = random_instance(seed).unwrap();
        if inst.head.is_categorical() {
            continue;
        }
        let o = inst.oracle().unwrap();
        assert!(rel_err_sym(&o.sigma().unwrap(), &o.sigma_woodbury_inverse_form().unwrap()) < 1e-7);
        seen += 1;
    }
    assert!(seen > 0);
}

#[test]
fn projected_covariance_forms_agree() {
    for seed in 0..20 {
        let inst = random_instance(seed).unwrap();
        let lam = inst.lambda();
        let a = sigma_prime(&inst.j_landmarks, &inst.j_x, &lam, inst.prior_var).unwrap();
        let b = sigma_prime_split(&inst.j_landmarks, &inst.j_x, &lam, inst.prior_var).unwrap();
        assert!((a.clone() - &b).norm() <= 1e-8 * (1.0 + a.norm()), "seed {seed}");
        if let Ok(c) = sigma_prime_literal(&inst.j_landmarks, &inst.j_x, &lam, inst.prior_var) {
            let gram = &inst.j_landmarks * inst.j_landmarks.transpose();
            let s = gram.clone().symmetric_eigenvalues();
            let cond = s.max() / s.min();
            if s.min() > 0.0 && cond < 1e6 {
                assert!((a.clone() - c).norm() <= 1e-6 * (1.0 + a.norm()), "seed {seed}");
            }
        }
    }
}

#[test]
fn theorem_bound_holds_on_many_instances() {
    for seed in 100..160 {
        let inst = random_instance(seed).unwrap();
        let r = check_theorem_bounds(&inst, 0.1).unwrap();
        assert!(r.holds_thm0, "seed {seed}: {r:?}");
        assert!(r.e <= r.prior_var * (1.0 + 1e-8));
    }
}

#[test]
fn last_layer_oracle_equals_restriction() {
    let arch = Arc::new(ArchDescriptor::mlp(&[1, 5, 1], Activation::Tanh).unwrap());
    let params = FlatParams::init(arch.clone(), 2);
    let data = gen_sine_regression(8, 0);
    let head = LikelihoodHead::gaussian(0.1).unwrap();
    let o = LlaOracle::from_model(&params, &data, &head, 1.5).unwrap();
    let ll = o.last_layer(&arch).unwrap();
    let range = arch.last_dense_range().unwrap();
    let manual = o.restricted(range.clone()).unwrap();
    let j = jacobian(&params, &[0.4]).unwrap();
    assert_eq!(ll.kappa_lla_exact(&j, &j), manual.kappa_lla_exact(&j, &j));
    let sub = j.columns(range.start, range.len()).into_owned();
    let only_last = LlaOracle::new(o.j_x().columns(range.start, range.len()).into_owned(), &blocks(&o), 1.5, 1).unwrap();
    assert!(rel_err_sym(&ll.kappa_lla_exact(&j, &j), &only_last.kappa_lla_exact(&sub, &sub)) < 1e-12);
}

fn blocks(o: &LlaOracle) -> Vec<DMatrix<f64>> {
    let c = o.classes();
    (0..o.j_x().nrows() / c).map(|i| o.lambda().view((i * c, i * c), (c, c)).into_owned()).collect()
}

#[test]
fn diagonal_baseline_is_exact_for_orthogonal_features() {
    let j_x = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.5]);
    let lam: Vec<DMatrix<f64>> = (0..3).map(|_| DMatrix::from_element(1, 1, 4.0)).collect();
    let o = LlaOracle::new(j_x, &lam, 0.8, 1).unwrap();
    let j = DMatrix::from_row_slice(1, 3, &[0.3, 1.0, -2.0]);
    assert!(rel_err_sym(&o.kappa_lla_diag(&j, &j), &o.kappa_lla_exact(&j, &j)) < 1e-12);
}

#[test]
fn diagonal_baseline_differs_for_correlated_features() {
    let j_x = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.9]);
    let lam: Vec<DMatrix<f64>> = (0..2).map(|_| DMatrix::from_element(1, 1, 1.0)).collect();
    let o = LlaOracle::new(j_x, &lam, 1.0, 1).unwrap();
    let j = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
    assert!(rel_err_sym(&o.kappa_lla_diag(&j, &j), &o.kappa_lla_exact(&j, &j)) > 1e-3);
}

#[test]
fn kl_matches_monte_carlo() {
    let p = PredictiveGaussian::new(vec![0.3, -0.2], DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.6])).unwrap();
    let q = PredictiveGaussian::new(vec![-0.1, 0.4], DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.9])).unwrap();
    let closed = kl_gaussian(&p, &q).unwrap();
    let log_density = |g: &PredictiveGaussian, x: &DVector<f64>| {
        let ch = g.covariance.clone().cholesky().unwrap();
        let d = x - DVector::from_vec(g.mean.clone());
        let logdet: f64 = ch.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
        -0.5 * (d.dot(&ch.solve(&d)) + logdet + 2.0 * (2.0 * std::f64::consts::PI).ln())
    };
    let l = p.covariance.clone().cholesky().unwrap().l();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = DVector::from_vec(p.mean.clone()) + &l * z;
        acc += log_density(&p, &x) - log_density(&q, &x);
    }
    let mc = acc / n as f64;
    assert!((mc - closed).abs() < 5e-3, "closed {closed}, mc {mc}");
}

#[test]
fn kl_of_identical_gaussians_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let cov = &a * a.transpose() + DMatrix::identity(3, 3) * 0.1;
        let g = PredictiveGaussian::new(vec![rng.random(), rng.random(), rng.random()], cov).unwrap();
        assert!(kl_gaussian(&g, &g).unwrap() < 1e-10);
    }
}
