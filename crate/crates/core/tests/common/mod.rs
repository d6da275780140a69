//! Dense reference implementations used as test oracles. Everything here
//! forms `p x p` matrices and is only meant for small instances.
#![allow(dead_code)]

use fad_core::profile::Loadings;
use fad_core::{DataSet, ScaleMode};
use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef, Side};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// `n` draws from a `q`-factor model with `N(0, 1)` loadings and uniform
/// `psi` in `[0.2, 0.8]`.
pub fn factor_data(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize) -> DataSet {
    let lambda = gaussian(rng, p, q);
    let sd: Vec<f64> = (0..p).map(|_| rng.random_range(0.2f64..0.8).sqrt()).collect();
    let z = gaussian(rng, n, q);
    let mut y = z.dot(&lambda.t());
    for mut row in y.rows_mut() {
        for (v, s) in row.iter_mut().zip(&sd) {
            let e: f64 = StandardNormal.sample(rng);
            *v += s * e;
        }
    }
    DataSet::new(y).unwrap()
}

pub fn random_psi(rng: &mut ChaCha8Rng, p: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..p).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn from_faer(a: MatRef<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Centered data, divided by the column standard deviation in correlation
/// mode.
pub fn centered(data: &DataSet, mode: ScaleMode) -> Array2<f64> {
    let mut y = data.values().clone();
    for (j, mut col) in y.columns_mut().into_iter().enumerate() {
        let m = data.col_mean()[j];
        let s = match mode {
            ScaleMode::Correlation => data.col_sd()[j],
            ScaleMode::Covariance => 1.0,
        };
        col.mapv_inplace(|v| (v - m) / s);
    }
    y
}

/// `S` with divisor `n`.
pub fn dense_s(data: &DataSet, mode: ScaleMode) -> Array2<f64> {
    let y = centered(data, mode);
    y.t().dot(&y) / data.n() as f64
}

/// Explicit `n^{-1/2} (Y - 1 mean^T) Psi^{-1/2}`.
pub fn dense_w(data: &DataSet, psi: &[f64], mode: ScaleMode) -> Array2<f64> {
    let mut w = centered(data, mode) / (data.n() as f64).sqrt();
    for (j, mut col) in w.columns_mut().into_iter().enumerate() {
        col /= psi[j].sqrt();
    }
    w
}

/// Gaussian log-likelihood `-n/2 (p log 2 pi + log det Sigma + tr Sigma^{-1} S)`
/// with `Sigma = Lambda Lambda^T + Psi`, through a dense Cholesky factor.
pub fn dense_loglik(s: &Array2<f64>, n: usize, lambda: &Array2<f64>, psi: &[f64]) -> f64 {
    let p = s.nrows();
    let mut sigma = lambda.dot(&lambda.t());
    for j in 0..p {
        sigma[[j, j]] += psi[j];
    }
    let chol = to_faer(&sigma).llt(Side::Lower).expect("Sigma is positive definite");
    let log_det = 2.0 * (0..p).map(|j| chol.L()[(j, j)].ln()).sum::<f64>();
    let solved = chol.solve(to_faer(s));
    let trace = (0..p).map(|j| solved[(j, j)]).sum::<f64>();
    -0.5 * n as f64 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + trace)
}

/// Singular values in nonincreasing order with matching right vectors.
pub fn dense_svd(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let svd = to_faer(a).thin_svd().expect("dense SVD");
    let values = svd.S().column_vector().iter().copied().collect();
    (values, from_faer(svd.V()))
}

/// Profiled loadings and `theta` from a dense eigendecomposition of
/// `Psi^{-1/2} S Psi^{-1/2}`.
pub fn dense_profile(s: &Array2<f64>, psi: &[f64], q: usize) -> (Array2<f64>, Vec<f64>) {
    let p = s.nrows();
    let scaled = Array2::from_shape_fn((p, p), |(i, j)| s[[i, j]] / (psi[i] * psi[j]).sqrt());
    let eig = to_faer(&scaled).self_adjoint_eigen(Side::Lower).expect("dense eigendecomposition");
    let (vals, vecs) = (eig.S().column_vector(), eig.U());
    let theta: Vec<f64> = (0..q).map(|k| vals[p - 1 - k]).collect();
    let lambda = Array2::from_shape_fn((p, q), |(j, k)| {
        psi[j].sqrt() * vecs[(j, p - 1 - k)] * (theta[k] - 1.0).max(0.0).sqrt()
    });
    (lambda, theta)
}

/// Profile log-likelihood as the dense likelihood at the dense profiled
/// loadings.
pub fn dense_profile_loglik(s: &Array2<f64>, n: usize, psi: &[f64], q: usize) -> f64 {
    let (lambda, _) = dense_profile(s, psi, q);
    dense_loglik(s, n, &lambda, psi)
}

/// Central differences with per-coordinate steps.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], steps: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + steps[j];
            let up = f(&probe);
            probe[j] = x[j] - steps[j];
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * steps[j])
        })
        .collect()
}

/// One textbook EM step with explicit `S` and `Sigma`:
/// `beta = Lambda^T Sigma^{-1}`, `Lambda' = S beta^T (I - beta Lambda + beta S beta^T)^{-1}`,
/// `psi' = diag(S - Lambda' beta S)`, then clamped.
pub fn dense_em_step(s: &Array2<f64>, lambda: &Array2<f64>, psi: &[f64], lo: f64, hi: f64) -> (Array2<f64>, Vec<f64>) {
    let (p, q) = lambda.dim();
    let mut sigma = lambda.dot(&lambda.t());
    for j in 0..p {
        sigma[[j, j]] += psi[j];
    }
    let sigma_inv = from_faer(to_faer(&sigma).partial_piv_lu().inverse().as_ref());
    let beta = lambda.t().dot(&sigma_inv);
    let ezz = Array2::<f64>::eye(q) - beta.dot(lambda) + beta.dot(s).dot(&beta.t());
    let new_lambda = s.dot(&beta.t()).dot(&from_faer(to_faer(&ezz).partial_piv_lu().inverse().as_ref()));
    let corr = new_lambda.dot(&beta).dot(s);
    let new_psi = (0..p).map(|j| (s[[j, j]] - corr[[j, j]]).clamp(lo, hi)).collect();
    (new_lambda, new_psi)
}

pub fn fro(a: &Array2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn rel_mat(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    fro(&(a - b)) / fro(b)
}

pub fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

pub fn llt(l: &Loadings) -> Array2<f64> {
    l.as_array().dot(&l.as_array().t())
}

/// Cosine of the largest principal angle between two column spaces with
/// orthonormal bases.
pub fn subspace_alignment(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let c = a.t().dot(b);
    let sv = to_faer(&c).singular_values().expect("singular values");
    sv.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Random `rows x cols` matrix with orthonormal columns.
pub fn orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let g = to_faer(&gaussian(rng, rows, cols));
    from_faer(g.qr().compute_thin_Q().as_ref())
}

/// Proptest settings without on-disk regression files.
pub fn cases(n: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases: n,
        failure_persistence: None,
        ..proptest::test_runner::Config::default()
    }
}
