mod common;

use common::*;
use fad_core::fad::{fit_fad, FitConfig};
use fad_core::profile::{full_loglik, profile_eval, recover_loadings, rescale_to_covariance, Loadings};
use fad_core::{DataSet, ScaleMode, SvdConfig};
use ndarray::Array2;
use proptest::prelude::*;

const MODES: [ScaleMode; 2] = [ScaleMode::Correlation, ScaleMode::Covariance];

fn small_instance(seed: u64, n: usize, p: usize, lo: f64, hi: f64) -> (DataSet, Vec<f64>) {
    let mut r = rng(seed);
    let data = DataSet::new(gaussian(&mut r, n, p)).unwrap();
    let psi = random_psi(&mut r, p, lo, hi);
    (data, psi)
}

#[test]
fn value_matches_dense_likelihood_at_profiled_loadings() {
    let (data, psi) = small_instance(1, 12, 5, 0.2, 0.9);
    for mode in MODES {
        let eval = profile_eval(&data, &psi, 2, mode, &SvdConfig::default()).unwrap();
        let s = dense_s(&data, mode);
        let dense = dense_profile_loglik(&s, 12, &psi, 2);
        assert!((eval.value - dense).abs() < 1e-9 * dense.abs(), "{} vs {dense}", eval.value);
        let (_, theta) = dense_profile(&s, &psi, 2);
        assert!(rel_vec(&eval.theta, &theta) < 1e-10);
        let lambda = recover_loadings(&eval, &psi);
        let at_lambda = dense_loglik(&s, 12, lambda.as_array(), &psi);
        assert!((eval.value - at_lambda).abs() < 1e-9 * at_lambda.abs());
    }
}

#[test]
fn gradient_matches_finite_differences_of_dense_oracle() {
    let (data, psi) = small_instance(2, 12, 5, 0.2, 0.6);
    let s = dense_s(&data, ScaleMode::Correlation);
    let eval = profile_eval(&data, &psi, 2, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
    assert!(eval.theta.iter().all(|&t| t > 1.0 + 1e-3), "instance sits at a kink: {:?}", eval.theta);
    let steps = vec![1e-6; 5];
    let fd = central_diff(|x| dense_profile_loglik(&s, 12, x, 2), &psi, &steps);
    for (g, d) in eval.gradient.iter().zip(&fd) {
        assert!((g - d).abs() <= 1e-4 * d.abs().max(1e-3), "{g} vs {d}");
    }
}

#[test]
fn profiled_gamma_is_diagonal_theta_minus_one() {
    let (data, psi) = small_instance(3, 40, 12, 0.05, 0.3);
    let eval = profile_eval(&data, &psi, 3, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
    assert!(eval.theta.iter().all(|&t| t > 1.0));
    let gamma = recover_loadings(&eval, &psi).gamma(&psi);
    let want = Array2::from_diag(&ndarray::Array1::from(eval.theta.iter().map(|t| t - 1.0).collect::<Vec<_>>()));
    assert!(rel_mat(&gamma, &want) < 1e-10);
}

#[test]
fn large_uniquenesses_give_zero_loadings() {
    let (data, _) = small_instance(4, 30, 6, 0.0, 1.0);
    // W = Y_c / sqrt(n psi) has squared singular values below one when psi
    // exceeds the largest eigenvalue of the correlation matrix (at most p).
    let psi = vec![7.0; 6];
    let eval = profile_eval(&data, &psi, 2, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
    assert!(eval.theta.iter().all(|&t| t < 1.0));
    let lambda = recover_loadings(&eval, &psi);
    assert!(lambda.as_array().iter().all(|&v| v == 0.0));
}

#[test]
fn likelihood_is_rotation_invariant() {
    let (data, psi) = small_instance(5, 25, 8, 0.2, 0.8);
    let s = dense_s(&data, ScaleMode::Correlation);
    let eval = profile_eval(&data, &psi, 3, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
    let lambda = recover_loadings(&eval, &psi);
    let base = dense_loglik(&s, 25, lambda.as_array(), &psi);
    let mut r = rng(55);
    for _ in 0..5 {
        let q = orthonormal(&mut r, 3, 3);
        let rotated = lambda.as_array().dot(&q);
        let v = dense_loglik(&s, 25, &rotated, &psi);
        assert!((v - base).abs() < 1e-10 * base.abs());
        let matfree = full_loglik(&data, &Loadings::new(rotated), &psi, ScaleMode::Correlation).unwrap();
        assert!((matfree - base).abs() < 1e-10 * base.abs());
    }
}

#[test]
fn profiled_loadings_beat_random_probes() {
    let (data, psi) = small_instance(6, 30, 10, 0.2, 0.8);
    let eval = profile_eval(&data, &psi, 2, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
    let lambda = recover_loadings(&eval, &psi);
    let best = full_loglik(&data, &lambda, &psi, ScaleMode::Correlation).unwrap();
    let mut r = rng(66);
    for i in 0..50 {
        let scale = [0.01, 0.1, 1.0][i % 3];
        let probe = lambda.as_array() + &(gaussian(&mut r, 10, 2) * scale);
        let v = full_loglik(&data, &Loadings::new(probe), &psi, ScaleMode::Correlation).unwrap();
        assert!(v <= best + 1e-10 * best.abs(), "probe {i}: {v} > {best}");
    }
}

#[test]
fn full_loglik_matches_dense() {
    let mut r = rng(7);
    for mode in MODES {
        for _ in 0..5 {
            let data = DataSet::new(gaussian(&mut r, 10, 8)).unwrap();
            let lambda = gaussian(&mut r, 8, 3);
            let psi = random_psi(&mut r, 8, 0.1, 2.0);
            let got = full_loglik(&data, &Loadings::new(lambda.clone()), &psi, mode).unwrap();
            let want = dense_loglik(&dense_s(&data, mode), 10, &lambda, &psi);
            assert!((got - want).abs() < 1e-10 * want.abs(), "{got} vs {want}");
        }
    }
}

#[test]
fn identity_model_on_correlation_scale() {
    let (data, _) = small_instance(8, 15, 6, 0.0, 1.0);
    let v = full_loglik(&data, &Loadings::zeros(6, 2), &[1.0; 6], ScaleMode::Correlation).unwrap();
    let want = -7.5 * (6.0 * (2.0 * std::f64::consts::PI).ln() + 6.0);
    assert!((v - want).abs() < 1e-12 * want.abs());
}

#[test]
fn rescaled_sigma_is_conjugated_correlation() {
    let mut r = rng(9);
    let data = DataSet::new(gaussian(&mut r, 8, 5) * 3.0).unwrap();
    let lambda = Loadings::new(gaussian(&mut r, 5, 2) * 0.5);
    let psi = random_psi(&mut r, 5, 0.2, 0.8);
    let (ls, psi_s) = rescale_to_covariance(&lambda, &psi, &data);
    let sigma_r = llt(&lambda) + Array2::from_diag(&ndarray::Array1::from(psi.clone()));
    let sigma_s = llt(&ls) + Array2::from_diag(&ndarray::Array1::from(psi_s));
    let sd = data.col_sd();
    let want = Array2::from_shape_fn((5, 5), |(i, j)| sd[i] * sigma_r[[i, j]] * sd[j]);
    assert!(rel_mat(&sigma_s, &want) < 1e-10);

    let unit = DataSet::new(ndarray::array![[1.0, -1.0], [-1.0, 1.0]]).unwrap();
    assert_eq!(unit.col_sd(), &[1.0, 1.0]);
    let l = Loadings::new(ndarray::array![[0.3], [0.4]]);
    let (l2, psi2) = rescale_to_covariance(&l, &[0.5, 0.6], &unit);
    assert_eq!(l2, l);
    assert_eq!(psi2, vec![0.5, 0.6]);
}

#[test]
fn doubling_a_column_doubles_its_loadings() {
    let mut r = rng(10);
    let data = factor_data(&mut r, 20, 6, 1);
    let mut doubled = data.values().clone();
    doubled.column_mut(2).mapv_inplace(|v| 2.0 * v);
    let doubled = DataSet::new(doubled).unwrap();
    let cfg = FitConfig::default();
    let a = fit_fad(&data, 1, &cfg).unwrap().to_covariance(&data);
    let b = fit_fad(&doubled, 1, &cfg).unwrap().to_covariance(&doubled);
    for j in 0..6 {
        let factor = if j == 2 { 2.0 } else { 1.0 };
        let (la, lb) = (a.lambda_hat.as_array()[[j, 0]], b.lambda_hat.as_array()[[j, 0]]);
        assert!((lb - factor * la).abs() < 1e-6 * la.abs().max(1.0), "row {j}: {lb} vs {}", factor * la);
        assert!((b.psi_hat[j] - factor * factor * a.psi_hat[j]).abs() < 1e-6 * a.psi_hat[j].max(1.0));
    }
}

#[test]
fn canonical_loadings_have_ordered_diagonal_gamma() {
    let mut r = rng(11);
    let lambda = Loadings::new(gaussian(&mut r, 9, 3));
    let psi = random_psi(&mut r, 9, 0.2, 0.8);
    let c = lambda.canonicalize(&psi).unwrap();
    let g = c.gamma(&psi);
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                assert!(g[[i, j]].abs() <= 1e-6 * gmax);
            }
        }
    }
    assert!(g[[0, 0]] >= g[[1, 1]] && g[[1, 1]] >= g[[2, 2]]);
    assert!(rel_mat(&llt(&c), &llt(&lambda)) < 1e-12);
}

proptest! {
    #![proptest_config(cases(60))]

    #[test]
    fn profile_and_full_likelihood_agree(seed in 0u64..100_000, n in 5usize..30, p in 2usize..50, q in 1usize..5) {
        let q = q.min(n.min(p));
        let (data, psi) = small_instance(seed, n, p, 0.05, 1.0);
        let eval = profile_eval(&data, &psi, q, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
        let lambda = recover_loadings(&eval, &psi);
        let full = full_loglik(&data, &lambda, &psi, ScaleMode::Correlation).unwrap();
        prop_assert!((eval.value - full).abs() < 1e-8 * (1.0 + full.abs()), "{} vs {}", eval.value, full);
        prop_assert!(eval.theta.windows(2).all(|w| w[0] >= w[1]) && eval.theta.iter().all(|&t| t >= 0.0));
    }

    #[test]
    fn gradient_matches_own_finite_differences(seed in 0u64..100_000, n in 8usize..30, p in 2usize..15, q in 1usize..3) {
        let (data, psi) = small_instance(seed, n, p, 0.05, 0.5);
        let q = q.min(n.min(p));
        let f = |x: &[f64]| profile_eval(&data, x, q, ScaleMode::Correlation, &SvdConfig::default()).unwrap();
        let eval = f(&psi);
        prop_assume!(eval.theta.iter().all(|&t| t > 1.0 + 1e-3));
        let steps: Vec<f64> = psi.iter().map(|v| 1e-6 * v).collect();
        let fd = central_diff(|x| f(x).value, &psi, &steps);
        for ((g, d), h) in eval.gradient.iter().zip(&fd).zip(&steps) {
            // rounding in the two function values, amplified by 1 / h
            let noise = 100.0 * f64::EPSILON * eval.value.abs() / h;
            prop_assert!((g - d).abs() <= 1e-5 * d.abs() + noise, "{} vs {}", g, d);
        }
    }
}
