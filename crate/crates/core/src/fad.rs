//! Factor analysis by maximizing the profile likelihood over `Psi`.

use std::time::Instant;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::em::EmConfig;
use crate::error::{FadError, Result};
use crate::lanczos::{partial_svd, SvdConfig};
use crate::lbfgsb::{maximize_preconditioned, Bounds, LbfgsbConfig, Status};
use crate::operator::{diag_s, ImplicitW, ScaleMode};
use crate::profile::{full_loglik, profile_eval, recover_loadings, score_residual, Loadings};
use crate::report::{bic, FitReport, Method};

/// Loadings used for the common starting point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartLoadings {
    /// Principal-component loadings `V_q H_q`.
    #[default]
    Scaled,
    /// Unit-norm leading principal directions `V_q`.
    Directions,
}

impl std::str::FromStr for StartLoadings {
    type Err = FadError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "directions" => Ok(StartLoadings::Directions),
            "scaled" => Ok(StartLoadings::Scaled),
            _ => Err(FadError::InvalidArgument(format!("unknown start '{s}'"))),
        }
    }
}

/// Settings shared by both fitting methods. Fits always run on the
/// correlation scale, where `psi` lies in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub psi_lo: f64,
    pub psi_hi: f64,
    pub start: StartLoadings,
    pub lbfgsb: LbfgsbConfig,
    pub svd: SvdConfig,
    pub em: EmConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            psi_lo: 0.005,
            psi_hi: 1.0,
            start: StartLoadings::Scaled,
            lbfgsb: LbfgsbConfig::default(),
            svd: SvdConfig::default(),
            em: EmConfig::default(),
        }
    }
}

impl FitConfig {
    pub(crate) fn validate(&self, data: &DataSet, q: usize) -> Result<()> {
        if !(self.psi_lo > 0.0 && self.psi_lo < self.psi_hi && self.psi_hi.is_finite()) {
            return Err(FadError::InvalidArgument(format!(
                "psi bounds must satisfy 0 < lo < hi, got [{}, {}]",
                self.psi_lo, self.psi_hi
            )));
        }
        let limit = data.n().min(data.p());
        if q == 0 || q > limit {
            return Err(FadError::InvalidArgument(format!(
                "number of factors must lie in 1..={limit}, got {q}"
            )));
        }
        Ok(())
    }
}

/// Principal-component start from the correlation-scale data: `Lambda_0` is
/// `V_q` or `V_q H_q` and `psi_0 = clamp(1 - diag(Lambda_0 Lambda_0^T))`.
pub fn pca_start(data: &DataSet, q: usize, cfg: &FitConfig) -> Result<(Loadings, Vec<f64>)> {
    let w = ImplicitW::unweighted(data, ScaleMode::Correlation);
    let trip = partial_svd(&w, q, &cfg.svd)?;
    if !trip.converged {
        return Err(FadError::SvdNotConverged {
            restarts: trip.restarts,
            max_residual: trip.residuals.iter().cloned().fold(0.0, f64::max),
        });
    }
    let mut lambda = trip.right_vectors;
    if cfg.start == StartLoadings::Scaled {
        for (mut col, &h) in lambda.axis_iter_mut(Axis(1)).zip(&trip.values) {
            col *= h;
        }
    }
    let lambda = Loadings::new(lambda);
    let psi = lambda
        .row_sumsq()
        .iter()
        .map(|l| (1.0 - l).clamp(cfg.psi_lo, cfg.psi_hi))
        .collect();
    Ok((lambda, psi))
}

pub fn fit_fad(data: &DataSet, q: usize, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate(data, q)?;
    let start = Instant::now();
    let mode = ScaleMode::Correlation;
    let (_, psi0) = pca_start(data, q, cfg)?;
    let mut lanczos_calls = 1;

    let bounds = Bounds::uniform(data.p(), cfg.psi_lo, cfg.psi_hi);
    let mut last = None;
    let objective = |psi: &[f64]| {
        let eval = profile_eval(data, psi, q, mode, &cfg.svd)?;
        lanczos_calls += 1;
        let out = (eval.value, eval.gradient.clone());
        last = Some((psi.to_vec(), eval));
        Ok(out)
    };
    // The curvature of l_p in psi_j is close to n / (2 psi_j^2).
    let half_n = 0.5 * data.n() as f64;
    let precond = |psi: &[f64]| psi.iter().map(|v| v * v / half_n).collect();
    let (psi, trace) = maximize_preconditioned(objective, Some(precond), &psi0, &bounds, &cfg.lbfgsb)?;

    let eval = match last {
        Some((x, eval)) if x == psi => eval,
        _ => {
            lanczos_calls += 1;
            profile_eval(data, &psi, q, mode, &cfg.svd)?
        }
    };
    let lambda = recover_loadings(&eval, &psi).canonicalize(&psi)?;
    let loglik = full_loglik(data, &lambda, &psi, mode)?;
    let residual = score_residual(&lambda, &psi, &diag_s(data, mode));

    Ok(FitReport {
        method: Method::Fad,
        q,
        n: data.n(),
        p: data.p(),
        scale: mode,
        loglik,
        bic: bic(loglik, data.n(), data.p(), q),
        psi_hat: psi,
        lambda_hat: lambda,
        grad_inf_norm: trace.proj_grad_inf_norm,
        score_residual: residual,
        iterations: trace.iterations,
        objective_calls: trace.evaluations,
        lanczos_calls,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        status: trace.status,
        converged: trace.status == Status::Converged,
        hit_max_iter: trace.status == Status::MaxIter,
        monotonicity_violations: 0,
        loglik_trace: trace.values,
    })
}
