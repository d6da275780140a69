//! Factor-count selection by BIC and fit comparison metrics.

use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::em::fit_em;
use crate::error::{FadError, Result};
use crate::fad::{fit_fad, FitConfig};
use crate::linalg::qr_r;
use crate::profile::Loadings;
use crate::report::{FitReport, Method};

pub fn fit(data: &DataSet, q: usize, method: Method, cfg: &FitConfig) -> Result<FitReport> {
    match method {
        Method::Fad => fit_fad(data, q, cfg),
        Method::Em => fit_em(data, q, cfg),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitFailure {
    pub method: Method,
    pub q: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub method: Method,
    pub q_best: usize,
    /// Successful fits ordered by `q`.
    pub reports: Vec<FitReport>,
    pub failures: Vec<FitFailure>,
}

impl Selection {
    pub fn best(&self) -> &FitReport {
        self.report(self.q_best).expect("q_best always has a report")
    }

    pub fn report(&self, q: usize) -> Option<&FitReport> {
        self.reports.iter().find(|r| r.q == q)
    }
}

/// Fits `k = 1..=k_max` independently and picks the smallest BIC, breaking
/// ties toward fewer factors.
pub fn select_q(data: &DataSet, k_max: usize, method: Method, cfg: &FitConfig) -> Result<Selection> {
    let limit = data.n().min(data.p());
    if k_max == 0 || k_max >= limit {
        return Err(FadError::InvalidArgument(format!(
            "max factors must lie in 1..={}, got {k_max}",
            limit - 1
        )));
    }
    let outcomes: Vec<(usize, Result<FitReport>)> = (1..=k_max)
        .into_par_iter()
        .map(|k| (k, fit(data, k, method, cfg)))
        .collect();

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (q, out) in outcomes {
        match out {
            Ok(r) => reports.push(r),
            Err(e) => failures.push(FitFailure {
                method,
                q,
                message: e.to_string(),
            }),
        }
    }
    let q_best = reports
        .iter()
        .fold(None::<&FitReport>, |best, r| match best {
            Some(b) if b.bic <= r.bic => Some(b),
            _ => Some(r),
        })
        .map(|r| r.q)
        .ok_or_else(|| {
            FadError::AllFitsFailed(
                failures
                    .iter()
                    .map(|f| format!("q={}: {}", f.q, f.message))
                    .collect::<Vec<_>>()
                    .join("; "),
            )
        })?;
    Ok(Selection {
        method,
        q_best,
        reports,
        failures,
    })
}

/// `||A A^T + diag(da) - B B^T - diag(db)||_F^2` without forming `p x p`
/// matrices. With `[A, B] = Q [Ra, Rb]`, the low-rank part has the norm of
/// `Ra Ra^T - Rb Rb^T`; differencing the small factors directly keeps
/// relative accuracy when `A A^T` and `B B^T` nearly coincide.
pub fn lowrank_diag_dist_sq(a: &Array2<f64>, da: &[f64], b: &Array2<f64>, db: &[f64]) -> f64 {
    if a == b && da == db {
        return 0.0;
    }
    let (qa, qb) = (a.ncols(), b.ncols());
    let lowrank = if qa + qb == 0 {
        0.0
    } else {
        let r = qr_r(&concatenate![Axis(1), *a, *b]);
        let ra = r.slice(s![.., ..qa]);
        let rb = r.slice(s![.., qa..]);
        (ra.dot(&ra.t()) - rb.dot(&rb.t())).iter().map(|x| x * x).sum()
    };
    let mut diag = 0.0;
    for j in 0..da.len() {
        let d = da[j] - db[j];
        let ra: f64 = a.row(j).iter().map(|x| x * x).sum();
        let rb: f64 = b.row(j).iter().map(|x| x * x).sum();
        diag += 2.0 * d * (ra - rb) + d * d;
    }
    (lowrank + diag).max(0.0)
}

/// `||A A^T + diag(da)||_F^2`.
pub fn lowrank_diag_norm_sq(a: &Array2<f64>, da: &[f64]) -> f64 {
    let zeros = Array2::zeros((a.nrows(), 0));
    lowrank_diag_dist_sq(a, da, &zeros, &vec![0.0; da.len()])
}

fn rel_vec(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    ratio(num.sqrt(), den.sqrt())
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn rel_mat(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num: f64 = (a - b).iter().map(|x| x * x).sum();
    let den: f64 = b.iter().map(|x| x * x).sum();
    ratio(num.sqrt(), den.sqrt())
}

/// Simulation truth on the correlation scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    /// Canonical form, `p x q_true`.
    pub lambda: Loadings,
    pub psi: Vec<f64>,
    /// `Lambda^T Psi^{-1} Lambda`, diagonal.
    pub gamma: Array2<f64>,
}

/// Relative Frobenius errors against the truth.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthErrors {
    pub d_r: f64,
    /// Only defined when the fit has the true number of factors.
    pub d_gamma: Option<f64>,
    pub d_llt: f64,
}

pub fn truth_errors(fit: &FitReport, truth: &Truth) -> TruthErrors {
    let l = fit.lambda_hat.as_array();
    let t = truth.lambda.as_array();
    let zeros = vec![0.0; fit.p];
    let d_r = ratio(
        lowrank_diag_dist_sq(l, &fit.psi_hat, t, &truth.psi).sqrt(),
        lowrank_diag_norm_sq(t, &truth.psi).sqrt(),
    );
    let d_llt = ratio(
        lowrank_diag_dist_sq(l, &zeros, t, &zeros).sqrt(),
        lowrank_diag_norm_sq(t, &zeros).sqrt(),
    );
    let d_gamma = (fit.q == truth.lambda.q()).then(|| rel_mat(&fit.lambda_hat.gamma(&fit.psi_hat), &truth.gamma));
    TruthErrors { d_r, d_gamma, d_llt }
}

/// Discrepancies between two fits of the same data and factor count, relative
/// to `b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub q: usize,
    pub method_a: Method,
    pub method_b: Method,
    pub loglik_rel: f64,
    pub psi_rel: f64,
    pub gamma_rel: f64,
    pub llt_rel: f64,
    pub r_rel: f64,
    /// Wall time of `b` over wall time of `a`.
    pub speed_ratio: f64,
    pub truth_a: Option<TruthErrors>,
    pub truth_b: Option<TruthErrors>,
}

pub fn compare_fits(a: &FitReport, b: &FitReport, truth: Option<&Truth>) -> Result<ComparisonReport> {
    for (x, y) in [(a.p, b.p), (a.q, b.q), (a.n, b.n)] {
        if x != y {
            return Err(FadError::Dimension { expected: y, got: x });
        }
    }
    if a.scale != b.scale {
        return Err(FadError::InvalidArgument("fits are on different scales".into()));
    }
    let la = a.lambda_hat.as_array();
    let lb = b.lambda_hat.as_array();
    let zeros = vec![0.0; a.p];
    Ok(ComparisonReport {
        q: a.q,
        method_a: a.method,
        method_b: b.method,
        loglik_rel: ratio((a.loglik - b.loglik).abs(), b.loglik.abs()),
        psi_rel: rel_vec(&a.psi_hat, &b.psi_hat),
        gamma_rel: rel_mat(&a.lambda_hat.gamma(&a.psi_hat), &b.lambda_hat.gamma(&b.psi_hat)),
        llt_rel: ratio(
            lowrank_diag_dist_sq(la, &zeros, lb, &zeros).sqrt(),
            lowrank_diag_norm_sq(lb, &zeros).sqrt(),
        ),
        r_rel: ratio(
            lowrank_diag_dist_sq(la, &a.psi_hat, lb, &b.psi_hat).sqrt(),
            lowrank_diag_norm_sq(lb, &b.psi_hat).sqrt(),
        ),
        speed_ratio: b.wall_time_seconds / a.wall_time_seconds,
        truth_a: truth.map(|t| truth_errors(a, t)),
        truth_b: truth.map(|t| truth_errors(b, t)),
    })
}
