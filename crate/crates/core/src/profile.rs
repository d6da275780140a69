//! Profile log-likelihood over the uniquenesses.
//!
//! For fixed `Psi`, the loadings maximizing the Gaussian factor likelihood are
//! `Lambda = Psi^{1/2} V_q Delta` with `Delta_ii = max(theta_i - 1, 0)^{1/2}`,
//! where `theta_i` are the squared leading singular values of
//! `W = n^{-1/2} (Y - 1 Ybar^T) Psi^{-1/2}` and `V_q` its right singular vectors.
//! Substituting back gives
//!
//! ```text
//! l_p(Psi) = c - n/2 { log det Psi + tr(Psi^{-1} S) + sum_{theta_i > 1} (log theta_i - theta_i + 1) }
//! grad_j   = -n/2 (Lambda Lambda^T + Psi - S)_jj / psi_j^2
//! ```
//!
//! with `c = -n/2 p log(2 pi)`, so `l_p(Psi)` equals the full log-likelihood at
//! the profiled loadings. The gradient follows from `d l / d psi_j =
//! -n/2 (Sigma^{-1} (Sigma - S) Sigma^{-1})_jj` and the loading score equation,
//! which reduces `Sigma^{-1} (Sigma - S) Sigma^{-1}` to
//! `Psi^{-1} (Sigma - S) Psi^{-1}` on the diagonal. Without the `psi_j^-2`
//! factor the expression is only an ascent direction. Factors with `theta_i <= 1` get zero loadings and
//! contribute nothing to the sum or the gradient.

use std::f64::consts::PI;
use std::ops::Deref;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{FadError, Result};
use crate::lanczos::{partial_svd, SvdConfig};
use crate::linalg::{spd_inverse_logdet, sym_eig_desc};
use crate::operator::{diag_s, ImplicitW, ScaleMode};

/// `theta` values within this distance above 1 count as exactly 1.
pub const THETA_KINK: f64 = 1e-10;

/// Diagonal of `Psi`, every entry positive and finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Uniquenesses(Vec<f64>);

impl Uniquenesses {
    pub fn new(psi: Vec<f64>) -> Result<Self> {
        if let Some(j) = psi.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(FadError::InvalidArgument(format!(
                "uniqueness {j} = {} must be positive and finite",
                psi[j]
            )));
        }
        Ok(Self(psi))
    }

    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.0.iter().all(|&v| lo <= v && v <= hi)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Uniquenesses {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `p x q` loading matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Loadings(Array2<f64>);

impl Loadings {
    pub fn new(lambda: Array2<f64>) -> Self {
        Self(lambda)
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self(Array2::zeros((p, q)))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub fn p(&self) -> usize {
        self.0.nrows()
    }

    pub fn q(&self) -> usize {
        self.0.ncols()
    }

    /// `diag(Lambda Lambda^T)`.
    pub fn row_sumsq(&self) -> Vec<f64> {
        self.0
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|x| x * x).sum())
            .collect()
    }

    /// `Gamma = Lambda^T Psi^{-1} Lambda`.
    pub fn gamma(&self, psi: &[f64]) -> Array2<f64> {
        let scaled = self.scaled_by_psi(psi, -1.0);
        self.0.t().dot(&scaled)
    }

    fn scaled_by_psi(&self, psi: &[f64], power: f64) -> Array2<f64> {
        let mut a = self.0.clone();
        for (mut row, &s) in a.axis_iter_mut(Axis(0)).zip(psi) {
            row *= s.powf(power);
        }
        a
    }

    /// Rotates to the identifiability form: `Gamma` diagonal and nonincreasing,
    /// each column of `Psi^{-1/2} Lambda` with its largest-magnitude entry
    /// positive.
    pub fn canonicalize(&self, psi: &[f64]) -> Result<Loadings> {
        if self.q() == 0 {
            return Ok(self.clone());
        }
        let (_, rot) = sym_eig_desc(&self.gamma(psi))?;
        let mut out = self.0.dot(&rot);
        for mut col in out.axis_iter_mut(Axis(1)) {
            let imax = col
                .iter()
                .zip(psi)
                .enumerate()
                .max_by(|a, b| (a.1 .0 / a.1 .1.sqrt()).abs().total_cmp(&(b.1 .0 / b.1 .1.sqrt()).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if col[imax] < 0.0 {
                col *= -1.0;
            }
        }
        Ok(Loadings(out))
    }
}

impl Serialize for Loadings {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = self.0.rows().into_iter().map(|r| r.to_vec()).collect();
        rows.serialize(ser)
    }
}

impl<'de> Deserialize<'de> for Loadings {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(de)?;
        let p = rows.len();
        let q = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != q) {
            return Err(serde::de::Error::custom("ragged loading rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Array2::from_shape_vec((p, q), flat)
            .map(Loadings)
            .map_err(serde::de::Error::custom)
    }
}

/// Profile log-likelihood, its gradient and the pieces needed to rebuild
/// the loadings.
#[derive(Debug, Clone)]
pub struct ProfileEval {
    pub value: f64,
    pub gradient: Vec<f64>,
    /// Squared leading singular values, nonincreasing.
    pub theta: Vec<f64>,
    /// `V_q`, `p x q`.
    pub right_vectors: Array2<f64>,
    /// `-n/2 p log(2 pi)`.
    pub constant: f64,
    pub svd_restarts: usize,
    pub matvecs: usize,
}

impl ProfileEval {
    /// `max(theta_i - 1, 0)` with the kink snapped to zero.
    pub fn delta_sq(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| clamp_theta_excess(t)).collect()
    }
}

fn clamp_theta_excess(theta: f64) -> f64 {
    if theta <= 1.0 + THETA_KINK {
        0.0
    } else {
        theta - 1.0
    }
}

pub fn loglik_constant(n: usize, p: usize) -> f64 {
    -0.5 * n as f64 * p as f64 * (2.0 * PI).ln()
}

/// Evaluates `l_p(Psi)` and its gradient with a single partial SVD.
pub fn profile_eval(
    data: &DataSet,
    psi: &[f64],
    q: usize,
    mode: ScaleMode,
    svd_cfg: &SvdConfig,
) -> Result<ProfileEval> {
    let w = ImplicitW::new(data, psi, mode)?;
    let trip = partial_svd(&w, q, svd_cfg)?;
    if !trip.converged {
        return Err(FadError::SvdNotConverged {
            restarts: trip.restarts,
            max_residual: trip.residuals.iter().cloned().fold(0.0, f64::max),
        });
    }
    let theta: Vec<f64> = trip.values.iter().map(|h| h * h).collect();
    let ds = diag_s(data, mode);
    let n = data.n() as f64;

    let log_det_psi: f64 = psi.iter().map(|v| v.ln()).sum();
    let tr_psi_inv_s: f64 = ds.iter().zip(psi).map(|(s, v)| s / v).sum();
    let mut excess = 0.0;
    for &t in &theta {
        if clamp_theta_excess(t) > 0.0 {
            let term = t.ln() - t + 1.0;
            assert!(term <= 0.0, "log(theta) - theta + 1 = {term} > 0");
            excess += term;
        }
    }
    let constant = loglik_constant(data.n(), data.p());
    let value = constant - 0.5 * n * (log_det_psi + tr_psi_inv_s + excess);

    let delta_sq: Vec<f64> = theta.iter().map(|&t| clamp_theta_excess(t)).collect();
    let v = &trip.right_vectors;
    let gradient = (0..data.p())
        .map(|j| {
            let row = v.row(j);
            let ll: f64 = row
                .iter()
                .zip(&delta_sq)
                .map(|(x, d)| x * x * d)
                .sum::<f64>()
                * psi[j];
            -0.5 * n * (ll + psi[j] - ds[j]) / (psi[j] * psi[j])
        })
        .collect();

    Ok(ProfileEval {
        value,
        gradient,
        theta,
        right_vectors: trip.right_vectors,
        constant,
        svd_restarts: trip.restarts,
        matvecs: trip.matvecs,
    })
}

/// `Lambda = Psi^{1/2} V_q Delta`; columns with `theta_i <= 1` are zero.
pub fn recover_loadings(eval: &ProfileEval, psi: &[f64]) -> Loadings {
    let delta: Vec<f64> = eval.delta_sq().iter().map(|d| d.sqrt()).collect();
    let mut lambda = eval.right_vectors.clone();
    for (mut row, &s) in lambda.axis_iter_mut(Axis(0)).zip(psi) {
        let rs = s.sqrt();
        for (x, d) in row.iter_mut().zip(&delta) {
            *x *= rs * d;
        }
    }
    Loadings(lambda)
}

/// Pieces of the Woodbury evaluation of the full log-likelihood, reused by
/// the EM iteration.
#[derive(Clone)]
pub(crate) struct WoodburyTerms {
    pub loglik: f64,
    /// `A = Psi^{-1} Lambda`, `p x q`.
    pub a: Array2<f64>,
    /// `X A` for the scaled data `X` with `X^T X = S`, `n x q`.
    pub xa: Array2<f64>,
    /// `(I + Lambda^T Psi^{-1} Lambda)^{-1}`.
    pub m_inv: Array2<f64>,
}

pub(crate) fn woodbury_terms(
    w1: &ImplicitW<'_>,
    ds: &[f64],
    lambda: &Loadings,
    psi: &[f64],
) -> Result<WoodburyTerms> {
    let data = w1.data();
    let n = data.n() as f64;
    let q = lambda.q();
    let log_det_psi: f64 = psi.iter().map(|v| v.ln()).sum();
    let tr_psi_inv_s: f64 = ds.iter().zip(psi).map(|(s, v)| s / v).sum();
    let a = lambda.scaled_by_psi(psi, -1.0);
    let m = Array2::eye(q) + lambda.as_array().t().dot(&a);
    let (m_inv, log_det_m) = if q == 0 {
        (m.clone(), 0.0)
    } else {
        spd_inverse_logdet(&m, "I + Lambda^T Psi^{-1} Lambda")?
    };
    let xa = w1.w_times_block(a.view());
    let correction = if q == 0 { 0.0 } else { (&m_inv * &xa.t().dot(&xa)).sum() };
    let loglik = loglik_constant(data.n(), data.p())
        - 0.5 * n * (log_det_psi + log_det_m + tr_psi_inv_s - correction);
    Ok(WoodburyTerms { loglik, a, xa, m_inv })
}

/// Full Gaussian log-likelihood at `(Lambda, Psi)` without forming `S` or
/// `Sigma`: the determinant lemma gives `log det Sigma` and the Woodbury
/// identity reduces `tr(Sigma^{-1} S)` to `n x q` and `p x q` products.
pub fn full_loglik(data: &DataSet, lambda: &Loadings, psi: &[f64], mode: ScaleMode) -> Result<f64> {
    let p = data.p();
    if lambda.p() != p {
        return Err(FadError::Dimension {
            expected: p,
            got: lambda.p(),
        });
    }
    if psi.len() != p {
        return Err(FadError::Dimension {
            expected: p,
            got: psi.len(),
        });
    }
    let w1 = ImplicitW::unweighted(data, mode);
    Ok(woodbury_terms(&w1, &diag_s(data, mode), lambda, psi)?.loglik)
}

/// Maps correlation-scale estimates back to the covariance scale:
/// `Lambda_S[j, k] = sd_j Lambda_R[j, k]`, `psi_S[j] = sd_j^2 psi_R[j]`.
pub fn rescale_to_covariance(lambda: &Loadings, psi: &[f64], data: &DataSet) -> (Loadings, Vec<f64>) {
    let sd = data.col_sd();
    let mut l = lambda.0.clone();
    for (mut row, &s) in l.axis_iter_mut(Axis(0)).zip(sd) {
        row *= s;
    }
    let psi_s = psi.iter().zip(sd).map(|(v, s)| v * s * s).collect();
    (Loadings(l), psi_s)
}

/// `max_j |s_jj - (Lambda Lambda^T)_jj - psi_j|`.
pub fn score_residual(lambda: &Loadings, psi: &[f64], ds: &[f64]) -> f64 {
    lambda
        .row_sumsq()
        .iter()
        .zip(psi)
        .zip(ds)
        .map(|((l, v), s)| (s - l - v).abs())
        .fold(0.0, f64::max)
}
