//! Synthetic factor-model data and head-to-head FAD/EM experiments.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{FadError, Result};
use crate::fad::FitConfig;
use crate::profile::Loadings;
use crate::report::Method;
use crate::selection::{compare_fits, select_q, truth_errors, ComparisonReport, Selection, Truth, TruthErrors};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum PsiLaw {
    Uniform { lo: f64, hi: f64 },
    /// Inverse gamma with mean 1; variance 0 gives the constant 1.
    InverseGamma { variance: f64 },
}

impl PsiLaw {
    /// `(shape, scale)` of the inverse gamma with mean 1 and variance `v`:
    /// mean `b / (a - 1) = 1` and variance `b^2 / ((a - 1)^2 (a - 2)) = v`
    /// give `a = 2 + 1/v`, `b = 1 + 1/v`.
    pub fn inverse_gamma_params(variance: f64) -> (f64, f64) {
        (2.0 + 1.0 / variance, 1.0 + 1.0 / variance)
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            PsiLaw::Uniform { lo, hi } => lo > 0.0 && lo <= hi && hi.is_finite(),
            PsiLaw::InverseGamma { variance } => variance >= 0.0 && variance.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(FadError::InvalidArgument(format!("invalid uniqueness law {self:?}")))
        }
    }

    fn sample_n(&self, rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
        match *self {
            PsiLaw::Uniform { lo, hi } => (0..p).map(|_| rng.random_range(lo..=hi)).collect(),
            PsiLaw::InverseGamma { variance } if variance == 0.0 => vec![1.0; p],
            PsiLaw::InverseGamma { variance } => {
                let (a, b) = Self::inverse_gamma_params(variance);
                let gamma = Gamma::new(a, 1.0).expect("shape is positive");
                (0..p).map(|_| b / gamma.sample(rng)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub q_true: usize,
    pub psi_law: PsiLaw,
    pub replicates: usize,
    pub seed: u64,
    pub k_max: usize,
    pub methods: Vec<Method>,
    pub fit: FitConfig,
}

pub const PRESETS: [&str; 4] = ["paper-small", "paper-medium", "high-noise", "voxel"];

impl SimConfig {
    pub fn preset(name: &str) -> Option<SimConfig> {
        let base = |n, p, q_true, psi_law, k_max| SimConfig {
            n,
            p,
            q_true,
            psi_law,
            replicates: 1,
            seed: 0,
            k_max,
            methods: vec![Method::Fad, Method::Em],
            fit: FitConfig::default(),
        };
        let uniform = PsiLaw::Uniform { lo: 0.2, hi: 0.8 };
        Some(match name {
            "paper-small" => base(100, 1000, 3, uniform, 6),
            "paper-medium" => base(225, 3375, 5, uniform, 10),
            "high-noise" => base(200, 1000, 3, PsiLaw::InverseGamma { variance: 1.0 }, 6),
            "voxel" => SimConfig {
                methods: vec![Method::Fad],
                ..base(160, 24547, 2, uniform, 2)
            },
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.psi_law.validate()?;
        let limit = self.n.min(self.p);
        let bad = if self.n < 2 || self.p < 1 {
            Some("need n >= 2 and p >= 1".to_string())
        } else if self.replicates == 0 {
            Some("replicates must be at least 1".into())
        } else if self.methods.is_empty() {
            Some("at least one method is required".into())
        } else if self.q_true >= limit {
            Some(format!("q_true must be below min(n, p) = {limit}"))
        } else if self.k_max == 0 || self.k_max >= limit {
            Some(format!("k_max must lie in 1..={}", limit - 1))
        } else {
            None
        };
        match bad {
            Some(msg) => Err(FadError::InvalidArgument(msg)),
            None => Ok(()),
        }
    }
}

fn normals(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Draws replicate `rep`: `Y_i = Lambda Z_i + eps_i` with `eps_i ~ N(0, Psi)`.
/// Each replicate has its own RNG stream, so it does not depend on which
/// other replicates run.
pub fn generate(cfg: &SimConfig, rep: usize) -> Result<(DataSet, Truth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    let psi = cfg.psi_law.sample_n(&mut rng, cfg.p);
    let lambda = normals(&mut rng, cfg.p, cfg.q_true);
    let z = normals(&mut rng, cfg.n, cfg.q_true);
    let mut y = normals(&mut rng, cfg.n, cfg.p);
    for mut row in y.axis_iter_mut(Axis(0)) {
        for (v, s) in row.iter_mut().zip(&psi) {
            *v *= s.sqrt();
        }
    }
    if cfg.q_true > 0 {
        ndarray::linalg::general_mat_mul(1.0, &z, &lambda.t(), 1.0, &mut y);
    }
    let data = DataSet::new(y)?;
    Ok((data, correlation_truth(&Loadings::new(lambda), &psi)?))
}

/// Correlation-scale truth for `Sigma = Lambda Lambda^T + Psi`, in canonical
/// form.
pub fn correlation_truth(lambda: &Loadings, psi: &[f64]) -> Result<Truth> {
    let var: Vec<f64> = lambda.row_sumsq().iter().zip(psi).map(|(l, v)| l + v).collect();
    let mut l = lambda.as_array().clone();
    for (mut row, v) in l.axis_iter_mut(Axis(0)).zip(&var) {
        row /= v.sqrt();
    }
    let psi_r: Vec<f64> = psi.iter().zip(&var).map(|(s, v)| s / v).collect();
    let lambda_r = Loadings::new(l).canonicalize(&psi_r)?;
    let gamma = lambda_r.gamma(&psi_r);
    Ok(Truth {
        lambda: lambda_r,
        psi: psi_r,
        gamma,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodErrors {
    pub method: Method,
    pub q: usize,
    pub errors: TruthErrors,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub rep: usize,
    pub selections: Vec<Selection>,
    /// FAD against EM at the true factor count, when both ran.
    pub comparison: Option<ComparisonReport>,
    /// Truth errors of each method's BIC-selected fit.
    pub selected_errors: Vec<MethodErrors>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub rep: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Quartiles {
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Quartiles {
    /// Linear-interpolation quartiles; `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Quartiles> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let at = |prob: f64| {
            let pos = prob * (v.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        };
        Some(Quartiles {
            count: v.len(),
            q1: at(0.25),
            median: at(0.5),
            q3: at(0.75),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub bic_hits: usize,
    pub bic_hit_rate: f64,
    pub d_r: Option<Quartiles>,
    pub d_gamma: Option<Quartiles>,
    pub d_llt: Option<Quartiles>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub completed: usize,
    pub failed: usize,
    pub methods: Vec<MethodSummary>,
    /// EM wall time over FAD wall time for each `k`, indexed from `k = 1`.
    pub speed_ratio_by_k: Vec<Option<Quartiles>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: SimConfig,
    pub replicates: Vec<ReplicateReport>,
    pub failures: Vec<ReplicateFailure>,
    pub summary: ExperimentSummary,
}

fn run_replicate(cfg: &SimConfig, rep: usize) -> Result<ReplicateReport> {
    let (data, truth) = generate(cfg, rep)?;
    let selections = cfg
        .methods
        .iter()
        .map(|&m| select_q(&data, cfg.k_max, m, &cfg.fit))
        .collect::<Result<Vec<_>>>()?;
    let find = |m: Method| selections.iter().find(|s| s.method == m);
    let comparison = match (find(Method::Fad), find(Method::Em)) {
        (Some(f), Some(e)) => match (f.report(cfg.q_true), e.report(cfg.q_true)) {
            (Some(a), Some(b)) => Some(compare_fits(a, b, Some(&truth))?),
            _ => None,
        },
        _ => None,
    };
    let selected_errors = selections
        .iter()
        .map(|s| MethodErrors {
            method: s.method,
            q: s.q_best,
            errors: truth_errors(s.best(), &truth),
        })
        .collect();
    Ok(ReplicateReport {
        rep,
        selections,
        comparison,
        selected_errors,
    })
}

fn summarize(cfg: &SimConfig, reps: &[ReplicateReport], failed: usize) -> ExperimentSummary {
    let methods = cfg
        .methods
        .iter()
        .map(|&m| {
            let errs: Vec<&MethodErrors> = reps
                .iter()
                .flat_map(|r| r.selected_errors.iter().filter(move |e| e.method == m))
                .collect();
            let hits = errs.iter().filter(|e| e.q == cfg.q_true).count();
            let col = |f: &dyn Fn(&TruthErrors) -> Option<f64>| {
                Quartiles::of(&errs.iter().filter_map(|e| f(&e.errors)).collect::<Vec<_>>())
            };
            MethodSummary {
                method: m,
                bic_hits: hits,
                bic_hit_rate: if reps.is_empty() {
                    0.0
                } else {
                    hits as f64 / reps.len() as f64
                },
                d_r: col(&|e| Some(e.d_r)),
                d_gamma: col(&|e| e.d_gamma),
                d_llt: col(&|e| Some(e.d_llt)),
            }
        })
        .collect();
    let speed_ratio_by_k = (1..=cfg.k_max)
        .map(|k| {
            let ratios: Vec<f64> = reps
                .iter()
                .filter_map(|r| {
                    let time = |m: Method| {
                        r.selections
                            .iter()
                            .find(|s| s.method == m)
                            .and_then(|s| s.report(k))
                            .map(|f| f.wall_time_seconds)
                    };
                    Some(time(Method::Em)? / time(Method::Fad)?)
                })
                .collect();
            Quartiles::of(&ratios)
        })
        .collect();
    ExperimentSummary {
        completed: reps.len(),
        failed,
        methods,
        speed_ratio_by_k,
    }
}

/// Runs every replicate concurrently. Failed replicates are recorded and
/// left out of the summary.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let outcomes: Vec<Result<ReplicateReport>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, rep))
        .collect();
    let mut replicates = Vec::new();
    let mut failures = Vec::new();
    for (rep, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(r) => replicates.push(r),
            Err(e) => failures.push(ReplicateFailure {
                rep,
                message: e.to_string(),
            }),
        }
    }
    let summary = summarize(cfg, &replicates, failures.len());
    Ok(ExperimentReport {
        config: cfg.clone(),
        replicates,
        failures,
        summary,
    })
}

impl ExperimentReport {
    /// Zeroes wall times and the ratios derived from them.
    pub fn strip_timing(&mut self) {
        for r in &mut self.replicates {
            for s in &mut r.selections {
                s.reports.iter_mut().for_each(|f| f.strip_timing());
            }
            if let Some(c) = &mut r.comparison {
                c.speed_ratio = 0.0;
            }
        }
        self.summary.speed_ratio_by_k.iter_mut().for_each(|q| *q = None);
    }

    /// One row per fit: truth errors against the correlation-scale truth.
    pub fn write_errors_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("rep,method,k,selected,d_r,d_gamma,d_llt\n");
        for r in &self.replicates {
            let (data_cfg, rep) = (&self.config, r.rep);
            let (_, truth) = generate(data_cfg, rep)?;
            for s in &r.selections {
                for f in &s.reports {
                    let e = truth_errors(f, &truth);
                    let gamma = e.d_gamma.map(|g| format!("{g:.16e}")).unwrap_or_default();
                    out.push_str(&format!(
                        "{rep},{},{},{},{:.16e},{gamma},{:.16e}\n",
                        s.method,
                        f.q,
                        f.q == s.q_best,
                        e.d_r,
                        e.d_llt
                    ));
                }
            }
        }
        write_text(path, &out)
    }

    pub fn write_timings_csv(&self, path: &Path) -> Result<()> {
        let mut out =
            String::from("rep,method,k,wall_time_seconds,iterations,lanczos_calls,converged,hit_max_iter\n");
        for r in &self.replicates {
            for s in &r.selections {
                for f in &s.reports {
                    out.push_str(&format!(
                        "{},{},{},{:.16e},{},{},{},{}\n",
                        r.rep, s.method, f.q, f.wall_time_seconds, f.iterations, f.lanczos_calls, f.converged, f.hit_max_iter
                    ));
                }
            }
        }
        write_text(path, &out)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| FadError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| FadError::io(path, e))
}
