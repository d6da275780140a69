//! Box-constrained limited-memory BFGS for maximization with a fused
//! value-and-gradient objective.
//!
//! Internally the negated objective is minimized. Each iteration:
//!
//! 1. variables sitting on a bound with the gradient pushing outward are held
//!    fixed (gradient-projection active set);
//! 2. the two-loop recursion over the last `memory` correction pairs gives a
//!    quasi-Newton direction on the free variables, falling back to steepest
//!    descent when that is not a descent direction;
//! 3. a projected backtracking search `x(t) = P(x + t d)`, `t = 1, 1/2, ...`
//!    accepts the first trial with sufficient decrease
//!    `f(x(t)) <= f(x) + c1 g^T (x(t) - x)`. Near the optimum the decrease
//!    drops below the rounding error of `f`; there a trial is also accepted
//!    when `f` is unchanged up to rounding and the slope along the step
//!    shrank as in the approximate Wolfe conditions.
//!
//! Every trial costs exactly one objective call returning value and gradient.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{FadError, Result};

const ARMIJO_C1: f64 = 1e-4;
/// Approximate Wolfe window on the slope along the step, `(2 d - 1)` and `sigma`.
const WOLFE_UPPER: f64 = -0.8;
const WOLFE_SIGMA: f64 = 0.9;
/// Relative rounding allowance on objective values.
const F_NOISE: f64 = 1e3 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbfgsbConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Relative-increase tolerance on the objective.
    pub f_rtol: f64,
    /// Tolerance on the infinity norm of the projected gradient.
    pub g_tol: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsbConfig {
    fn default() -> Self {
        Self {
            memory: 7,
            max_iter: 10_000,
            f_rtol: 100.0 * f64::EPSILON,
            g_tol: f64::EPSILON.sqrt(),
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Bounds {
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, &l), &h) in x.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = v.clamp(l, h);
        }
    }

    fn validate(&self, x0: &[f64]) -> Result<()> {
        let dim = x0.len();
        if self.lo.len() != dim || self.hi.len() != dim {
            return Err(FadError::Dimension {
                expected: dim,
                got: self.lo.len().min(self.hi.len()),
            });
        }
        for j in 0..dim {
            if !(self.lo[j] < self.hi[j]) {
                return Err(FadError::InvalidArgument(format!(
                    "bound {j}: lo = {} is not below hi = {}",
                    self.lo[j], self.hi[j]
                )));
            }
            if !(self.lo[j] <= x0[j] && x0[j] <= self.hi[j]) {
                return Err(FadError::InvalidArgument(format!(
                    "start {j} = {} outside [{}, {}]",
                    x0[j], self.lo[j], self.hi[j]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Converged,
    MaxIter,
    LineSearchFailed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitTrace {
    pub status: Status,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective at the returned iterate.
    pub best_value: f64,
    /// Best objective after each iteration, starting with the initial point.
    pub values: Vec<f64>,
    /// Objective gradient at the returned iterate.
    pub gradient: Vec<f64>,
    pub proj_grad_inf_norm: f64,
}

/// Infinity norm of `P(x - g) - x` for the minimization gradient `g`.
pub fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(j, (&xj, &gj))| ((xj - gj).clamp(bounds.lo[j], bounds.hi[j]) - xj).abs())
        .fold(0.0, f64::max)
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn masked_dot(a: &[f64], b: &[f64], free: &[bool]) -> f64 {
    a.iter()
        .zip(b)
        .zip(free)
        .filter(|(_, &f)| f)
        .map(|((x, y), _)| x * y)
        .sum()
}

/// Two-loop recursion restricted to the free variables, seeded with the
/// diagonal inverse-Hessian guess `diag` scaled by `s^T y / y^T diag y`.
fn quasi_newton_direction(g: &[f64], free: &[bool], history: &VecDeque<Pair>, diag: &[f64]) -> Vec<f64> {
    let mut q: Vec<f64> = g
        .iter()
        .zip(free)
        .map(|(&v, &f)| if f { v } else { 0.0 })
        .collect();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let a = pair.rho * masked_dot(&pair.s, &q, free);
        for ((qi, yi), &f) in q.iter_mut().zip(&pair.y).zip(free) {
            if f {
                *qi -= a * yi;
            }
        }
        alphas.push(a);
    }
    let gamma = history
        .back()
        .map(|p| {
            let ydy: f64 = p.y.iter().zip(diag).map(|(y, d)| y * y * d).sum();
            dot(&p.s, &p.y) / ydy
        })
        .unwrap_or(1.0);
    q.iter_mut().zip(diag).for_each(|(v, d)| *v *= gamma * d);
    for (pair, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = pair.rho * masked_dot(&pair.y, &q, free);
        for ((qi, si), &f) in q.iter_mut().zip(&pair.s).zip(free) {
            if f {
                *qi += (a - b) * si;
            }
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Maximizes `objective` over the box. The objective returns the value and
/// its gradient in one call.
pub fn maximize<F>(objective: F, x0: &[f64], bounds: &Bounds, cfg: &LbfgsbConfig) -> Result<(Vec<f64>, FitTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    maximize_preconditioned(objective, None::<fn(&[f64]) -> Vec<f64>>, x0, bounds, cfg)
}

/// As [`maximize`], with `precond(x)` a positive diagonal approximation of the
/// inverse Hessian of the negated objective. It seeds every two-loop
/// recursion and gives the first step `-D g` in place of the normalized
/// steepest-descent step.
pub fn maximize_preconditioned<F, P>(
    mut objective: F,
    precond: Option<P>,
    x0: &[f64],
    bounds: &Bounds,
    cfg: &LbfgsbConfig,
) -> Result<(Vec<f64>, FitTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    P: Fn(&[f64]) -> Vec<f64>,
{
    bounds.validate(x0)?;
    if cfg.memory == 0 {
        return Err(FadError::InvalidArgument("memory must be at least 1".into()));
    }
    let dim = x0.len();
    let mut eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = objective(x)?;
        if v.is_nan() || g.iter().any(|x| x.is_nan()) {
            return Err(FadError::NanObjective { psi: x.to_vec() });
        }
        Ok((-v, g.into_iter().map(|x| -x).collect()))
    };

    let mut x = x0.to_vec();
    let (mut f, mut g) = eval(&x)?;
    let mut evaluations = 1;
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut best = -f;
    let mut values = vec![best];
    let mut pg = projected_gradient_norm(&x, &g, bounds);
    let mut last_rel = f64::INFINITY;
    let mut iterations = 0;
    let mut status = Status::MaxIter;

    while iterations < cfg.max_iter {
        if pg < cfg.g_tol && last_rel < cfg.f_rtol {
            status = Status::Converged;
            break;
        }
        iterations += 1;

        let free: Vec<bool> = (0..dim)
            .map(|j| !((x[j] <= bounds.lo[j] && g[j] > 0.0) || (x[j] >= bounds.hi[j] && g[j] < 0.0)))
            .collect();
        let diag = match &precond {
            Some(p) => p(&x),
            None => vec![1.0; dim],
        };
        let fallback = |g: &[f64]| -> Vec<f64> {
            let scale = if precond.is_some() {
                1.0
            } else {
                let gn = masked_dot(g, g, &free).sqrt();
                if gn > 0.0 {
                    1.0 / gn
                } else {
                    0.0
                }
            };
            g.iter()
                .zip(&free)
                .zip(&diag)
                .map(|((&v, &fr), &dj)| if fr { -v * dj * scale } else { 0.0 })
                .collect()
        };
        let mut d = if history.is_empty() {
            fallback(&g)
        } else {
            quasi_newton_direction(&g, &free, &history, &diag)
        };
        if masked_dot(&g, &d, &free) >= 0.0 {
            history.clear();
            d = fallback(&g);
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..cfg.max_line_search {
            let mut xt: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            bounds.project(&mut xt);
            let step: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
            if step.iter().all(|&v| v == 0.0) {
                break;
            }
            let (ft, gt) = eval(&xt)?;
            evaluations += 1;
            let slope = dot(&g, &step);
            let slope_t = dot(&gt, &step);
            let armijo = ft <= f + ARMIJO_C1 * slope;
            let approx_wolfe = ft <= f + F_NOISE * f.abs().max(1.0)
                && slope_t >= WOLFE_SIGMA * slope
                && slope_t <= WOLFE_UPPER * slope;
            if armijo || approx_wolfe {
                accepted = Some((xt, ft, gt, step));
                break;
            }
            t *= 0.5;
        }

        let Some((xt, ft, gt, s)) = accepted else {
            // No trial improved the objective: the relative increase is zero,
            // so the stopping rule reduces to the gradient test.
            status = if pg < cfg.g_tol {
                Status::Converged
            } else {
                Status::LineSearchFailed
            };
            break;
        };

        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > f64::EPSILON * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        last_rel = ((f - ft) / f.abs().max(ft.abs()).max(1.0)).abs();
        x = xt;
        f = ft;
        g = gt;
        pg = projected_gradient_norm(&x, &g, bounds);
        best = best.max(-f);
        values.push(best);
    }
    if status == Status::MaxIter && pg < cfg.g_tol && last_rel < cfg.f_rtol {
        status = Status::Converged;
    }

    Ok((
        x,
        FitTrace {
            status,
            iterations,
            evaluations,
            best_value: -f,
            values,
            gradient: g.into_iter().map(|v| -v).collect(),
            proj_grad_inf_norm: pg,
        },
    ))
}
