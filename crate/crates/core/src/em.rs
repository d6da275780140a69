//! EM iteration for the Gaussian factor model, matrix-free.
//!
//! With `A = Psi^{-1} Lambda`, `M = I + Lambda^T A` and `SA = S A` (built from
//! two passes over the data), the Woodbury identity gives
//! `Lambda^T Sigma^{-1} = M^{-1} A^T`, so the M-step becomes
//!
//! ```text
//! Lambda' = SA (I + M^{-1} A^T SA)^{-1}
//! psi'_j  = s_jj - sum_k Lambda'_jk (SA M^{-1})_jk
//! ```
//!
//! using only `n x q`, `p x q` and `q x q` intermediates.

use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{FadError, Result};
use crate::fad::{pca_start, FitConfig};
use crate::lbfgsb::{projected_gradient_norm, Bounds, Status};
use crate::linalg::inverse;
use crate::operator::{diag_s, ImplicitW, ScaleMode};
use crate::profile::{profile_eval, score_residual, woodbury_terms, Loadings, WoodburyTerms};
use crate::report::{bic, FitReport, Method};

/// Which `Psi` update the M-step applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PsiUpdate {
    /// `diag(S - Lambda' Lambda^T Sigma^{-1} S)`, the ascent-preserving form.
    #[default]
    Standard,
    /// Doubles the cross term. Kept only for comparison; it does not preserve
    /// monotonicity.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    /// Relative log-likelihood change below which the gradient test runs.
    pub rtol: f64,
    /// Tolerance on the projected profile-gradient infinity norm.
    pub g_tol: f64,
    pub max_iter: usize,
    /// Iterations between profile-gradient checks once the relative change
    /// test passes. Each check costs one partial SVD.
    pub grad_check_interval: usize,
    pub psi_update: PsiUpdate,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            g_tol: f64::EPSILON.sqrt(),
            max_iter: 5000,
            grad_check_interval: 10,
            psi_update: PsiUpdate::Standard,
        }
    }
}

#[derive(Clone)]
pub struct EmState {
    pub lambda: Loadings,
    pub psi: Vec<f64>,
    pub loglik: f64,
    pub iter: usize,
    terms: WoodburyTerms,
}

/// Data-side context for EM steps: the unweighted operator, `diag(S)` and
/// the box for `psi`.
pub struct EmModel<'a> {
    w1: ImplicitW<'a>,
    ds: Vec<f64>,
    psi_lo: f64,
    psi_hi: f64,
    update: PsiUpdate,
}

impl<'a> EmModel<'a> {
    pub fn new(data: &'a DataSet, mode: ScaleMode, psi_lo: f64, psi_hi: f64, update: PsiUpdate) -> Self {
        Self {
            w1: ImplicitW::unweighted(data, mode),
            ds: diag_s(data, mode),
            psi_lo,
            psi_hi,
            update,
        }
    }

    pub fn state(&self, lambda: Loadings, psi: Vec<f64>) -> Result<EmState> {
        let p = self.ds.len();
        if lambda.p() != p || psi.len() != p {
            return Err(FadError::Dimension {
                expected: p,
                got: if lambda.p() != p { lambda.p() } else { psi.len() },
            });
        }
        let terms = woodbury_terms(&self.w1, &self.ds, &lambda, &psi)?;
        Ok(EmState {
            loglik: terms.loglik,
            lambda,
            psi,
            iter: 0,
            terms,
        })
    }

    pub fn step(&self, state: &EmState) -> Result<EmState> {
        let q = state.lambda.q();
        let WoodburyTerms { a, xa, m_inv, .. } = &state.terms;
        let sa = self.w1.wt_times_block(xa.view());
        let inner = Array2::eye(q) + m_inv.dot(&a.t().dot(&sa));
        let lambda = sa.dot(&inverse(&inner, "EM loading update")?);
        let cross = sa.dot(m_inv);
        let coef = match self.update {
            PsiUpdate::Standard => 1.0,
            PsiUpdate::Literal => 2.0,
        };
        let psi: Vec<f64> = lambda
            .axis_iter(Axis(0))
            .zip(cross.axis_iter(Axis(0)))
            .zip(&self.ds)
            .map(|((l, c), s)| (s - coef * l.dot(&c)).clamp(self.psi_lo, self.psi_hi))
            .collect();
        let lambda = Loadings::new(lambda);
        let terms = woodbury_terms(&self.w1, &self.ds, &lambda, &psi)?;
        Ok(EmState {
            loglik: terms.loglik,
            lambda,
            psi,
            iter: state.iter + 1,
            terms,
        })
    }

    /// `d l / d Lambda = n (Sigma^{-1} S Sigma^{-1} Lambda - Sigma^{-1} Lambda)`.
    /// With `Sigma^{-1} = Psi^{-1} - A M^{-1} A^T` and `Sigma^{-1} Lambda = A M^{-1}`
    /// it needs one more pass over the data for `S A`.
    pub fn loading_gradient(&self, state: &EmState) -> Array2<f64> {
        let WoodburyTerms { a, xa, m_inv, .. } = &state.terms;
        let n = self.w1.data().n() as f64;
        let b = a.dot(m_inv);
        let mut c = self.w1.wt_times_block(xa.view()).dot(m_inv);
        let correction = b.dot(&a.t().dot(&c));
        for (mut row, v) in c.axis_iter_mut(Axis(0)).zip(&state.psi) {
            row /= *v;
        }
        (c - correction - b) * n
    }
}

/// One EM step on the correlation scale with the default box.
pub fn em_step(state: &EmState, data: &DataSet) -> Result<EmState> {
    let cfg = FitConfig::default();
    EmModel::new(data, ScaleMode::Correlation, cfg.psi_lo, cfg.psi_hi, cfg.em.psi_update).step(state)
}

/// Relative slack allowed on the per-step log-likelihood increase.
pub const MONOTONE_SLACK: f64 = 1e-10;

pub fn fit_em(data: &DataSet, q: usize, cfg: &FitConfig) -> Result<FitReport> {
    cfg.validate(data, q)?;
    let start = Instant::now();
    let mode = ScaleMode::Correlation;
    let em = &cfg.em;
    let model = EmModel::new(data, mode, cfg.psi_lo, cfg.psi_hi, em.psi_update);
    let bounds = Bounds::uniform(data.p(), cfg.psi_lo, cfg.psi_hi);
    let (lambda0, psi0) = pca_start(data, q, cfg)?;
    let mut lanczos_calls = 1;

    // The profile gradient alone cannot see loadings that are still moving
    // while psi sits on a bound, so the loading gradient is checked as well.
    let gradient_norm = |state: &EmState| -> Result<f64> {
        let eval = profile_eval(data, &state.psi, q, mode, &cfg.svd)?;
        let g: Vec<f64> = eval.gradient.iter().map(|v| -v).collect();
        let loading = model.loading_gradient(state).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(projected_gradient_norm(&state.psi, &g, &bounds).max(loading))
    };
    let mut state = model.state(lambda0, psi0)?;
    let mut trace = vec![state.loglik];
    let mut violations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut grad_at = None;
    let mut last_check: Option<usize> = None;
    let mut status = Status::MaxIter;

    while state.iter < em.max_iter {
        let next = model.step(&state)?;
        if next.loglik < state.loglik - MONOTONE_SLACK * state.loglik.abs() {
            violations += 1;
        }
        let rel = (next.loglik - state.loglik).abs() / state.loglik.abs().max(f64::MIN_POSITIVE);
        state = next;
        trace.push(state.loglik);
        let due = last_check.is_none_or(|it| state.iter - it >= em.grad_check_interval.max(1));
        if rel < em.rtol && due {
            grad_norm = gradient_norm(&state)?;
            lanczos_calls += 1;
            grad_at = Some(state.iter);
            last_check = Some(state.iter);
            if grad_norm < em.g_tol {
                status = Status::Converged;
                break;
            }
        }
    }
    if grad_at != Some(state.iter) {
        grad_norm = gradient_norm(&state)?;
        lanczos_calls += 1;
    }

    let lambda = state.lambda.canonicalize(&state.psi)?;
    let residual = score_residual(&lambda, &state.psi, &model.ds);
    Ok(FitReport {
        method: Method::Em,
        q,
        n: data.n(),
        p: data.p(),
        scale: mode,
        loglik: state.loglik,
        bic: bic(state.loglik, data.n(), data.p(), q),
        psi_hat: state.psi,
        lambda_hat: lambda,
        grad_inf_norm: grad_norm,
        score_residual: residual,
        iterations: state.iter,
        objective_calls: state.iter + 1,
        lanczos_calls,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        status,
        converged: status == Status::Converged,
        hit_max_iter: status == Status::MaxIter,
        monotonicity_violations: violations,
        loglik_trace: trace,
    })
}
