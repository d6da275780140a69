//! Implicitly restarted Lanczos bidiagonalization for the leading singular
//! triplets of an implicit operator.
//!
//! The sweep starts from a random unit vector `f_1` on the row side of the
//! operator and builds orthonormal bases `F` (`n x m`) and `G` (`p x m`) with
//!
//! ```text
//! W^T F = G B,    W G = F B^T + r e_m^T
//! ```
//!
//! where `B` is upper bidiagonal on the first sweep. Both bases are fully
//! reorthogonalized (classical Gram-Schmidt, two passes) at every step. The
//! SVD `B = P H Q^T` gives Ritz triplets `h_j`, `v_j = G P_j` (right vectors of
//! `W`) and `u_j = F Q_j`, with `W v_j = h_j u_j + P_{m,j} r`. A triplet is
//! accepted once `beta_m |P_{m,j}| <= h_1 delta` for every wanted `j`.
//!
//! On restart the first `q` Ritz vectors are kept, `f_{q+1} = r / beta_m`, and
//! `B` becomes `diag(h_1..h_q)` bordered by `rho_j = beta_m P_{m,j}` in column
//! `q + 1`, followed by ordinary bidiagonal steps.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FadError, Result};
use crate::linalg::sorted_svd;
use crate::operator::{dot, LinearOperator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvdConfig {
    /// Relative residual tolerance on each wanted Ritz pair.
    pub delta: f64,
    pub max_restarts: usize,
    pub seed: u64,
    /// Override for the basis size; defaults to `max(2q + 1, 20)`.
    pub basis_size: Option<usize>,
}

impl Default for SvdConfig {
    fn default() -> Self {
        Self {
            delta: 1e-9,
            max_restarts: 1000,
            seed: 0,
            basis_size: None,
        }
    }
}

/// Basis size used for `q` wanted triplets on an `n x p` operator.
pub fn basis_size(q: usize, n: usize, p: usize) -> usize {
    (2 * q + 1).max(20).min(n.min(p))
}

/// Leading singular triplets of an operator.
#[derive(Debug, Clone)]
pub struct SingularTriplets {
    /// `h_1 >= ... >= h_q >= 0`.
    pub values: Vec<f64>,
    /// `p x q`, orthonormal columns, largest-magnitude entry of each positive.
    pub right_vectors: Array2<f64>,
    /// `n x q`, signs matched to `right_vectors`.
    pub left_vectors: Array2<f64>,
    /// `beta_m |P_{m,j}|` from the last sweep.
    pub residuals: Vec<f64>,
    pub restarts: usize,
    pub matvecs: usize,
    pub basis_size: usize,
    pub converged: bool,
}

/// State of one Lanczos sweep: `B`, the bases and the residual vector.
#[derive(Debug, Clone)]
pub struct BidiagonalSystem {
    b: Array2<f64>,
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    r: Vec<f64>,
    beta_m: f64,
    norm_est: f64,
}

impl BidiagonalSystem {
    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn m(&self) -> usize {
        self.b.nrows()
    }

    /// Left basis as an `n x m` matrix.
    pub fn f(&self) -> Array2<f64> {
        columns_to_array(&self.f)
    }

    /// Right basis as a `p x m` matrix.
    pub fn g(&self) -> Array2<f64> {
        columns_to_array(&self.g)
    }

    pub fn residual(&self) -> &[f64] {
        &self.r
    }

    pub fn beta_m(&self) -> f64 {
        self.beta_m
    }

    /// Floats held by the bases, `B` and the residual.
    pub fn workspace(&self) -> usize {
        let m = self.m();
        self.f.iter().chain(&self.g).map(Vec::len).sum::<usize>() + m * m + self.r.len()
    }
}

fn columns_to_array(cols: &[Vec<f64>]) -> Array2<f64> {
    let rows = cols.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows, cols.len()), |(i, j)| cols[j][i])
}

/// `beta_m |v~_{j,m}|` for `j = 1..q`, the quantities compared with `h_1 delta`.
pub fn ritz_residuals(beta_m: f64, last_row: &[f64], q: usize) -> Vec<f64> {
    last_row.iter().take(q).map(|x| beta_m * x.abs()).collect()
}

struct Sweeper<'a, O: LinearOperator + ?Sized> {
    op: &'a O,
    rng: ChaCha8Rng,
    matvecs: usize,
}

impl<O: LinearOperator + ?Sized> Sweeper<'_, O> {
    fn random_unit(&mut self, len: usize, basis: &[Vec<f64>]) -> Vec<f64> {
        loop {
            let mut x: Vec<f64> = (0..len)
                .map(|_| StandardNormal.sample(&mut self.rng))
                .collect();
            orthogonalize(&mut x, basis);
            let nrm = norm(&x);
            if nrm > 1e-8 {
                x.iter_mut().for_each(|v| *v /= nrm);
                return x;
            }
        }
    }

    fn breakdown_tol(sys: &BidiagonalSystem) -> f64 {
        1e3 * f64::EPSILON * sys.norm_est
    }

    /// Fills columns `k..m` of the bases and of `B`. On entry `F` has `k + 1`
    /// columns, `G` has `k`, and the border entries `B[0..k, k]` are set.
    fn extend(&mut self, sys: &mut BidiagonalSystem, k: usize) {
        let m = sys.m();
        let (n, p) = (self.op.nrows(), self.op.ncols());
        for j in k..m {
            let mut g = vec![0.0; p];
            self.op.apply_transpose(&sys.f[j], &mut g);
            self.matvecs += 1;
            for i in 0..j {
                let c = sys.b[[i, j]];
                if c != 0.0 {
                    axpy(-c, &sys.g[i], &mut g);
                }
            }
            orthogonalize(&mut g, &sys.g);
            let mut alpha = norm(&g);
            sys.norm_est = sys.norm_est.max(alpha);
            if alpha <= Self::breakdown_tol(sys) {
                g = self.random_unit(p, &sys.g);
                alpha = 0.0;
            } else {
                g.iter_mut().for_each(|v| *v /= alpha);
            }
            sys.b[[j, j]] = alpha;
            sys.g.push(g);

            let mut r = vec![0.0; n];
            self.op.apply(&sys.g[j], &mut r);
            self.matvecs += 1;
            axpy(-alpha, &sys.f[j], &mut r);
            orthogonalize(&mut r, &sys.f);
            let beta = norm(&r);
            sys.norm_est = sys.norm_est.max(beta);
            if j + 1 < m {
                let f = if beta <= Self::breakdown_tol(sys) {
                    sys.b[[j, j + 1]] = 0.0;
                    self.random_unit(n, &sys.f)
                } else {
                    sys.b[[j, j + 1]] = beta;
                    r.iter().map(|v| v / beta).collect()
                };
                sys.f.push(f);
            } else {
                sys.beta_m = beta;
                sys.r = r;
            }
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Two passes of classical Gram-Schmidt against an orthonormal basis.
fn orthogonalize(x: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        let coeffs: Vec<f64> = basis.iter().map(|b| dot(b, x)).collect();
        for (b, c) in basis.iter().zip(coeffs) {
            axpy(-c, b, x);
        }
    }
}

fn validate<O: LinearOperator + ?Sized>(op: &O, q: usize, cfg: &SvdConfig) -> Result<()> {
    let kmax = op.nrows().min(op.ncols());
    if q == 0 || q > kmax {
        return Err(FadError::InvalidArgument(format!(
            "need 1 <= q <= min(n, p) = {kmax}, got q = {q}"
        )));
    }
    if !(cfg.delta > 0.0) {
        return Err(FadError::InvalidArgument(format!(
            "delta must be positive, got {}",
            cfg.delta
        )));
    }
    Ok(())
}

fn full_svd<O: LinearOperator + ?Sized>(op: &O) -> Result<SingularTriplets> {
    let (n, p) = (op.nrows(), op.ncols());
    let k = n.min(p);
    let mut a = Array2::zeros((n, p));
    if p <= n {
        let (mut e, mut col) = (vec![0.0; p], vec![0.0; n]);
        for j in 0..p {
            e[j] = 1.0;
            op.apply(&e, &mut col);
            e[j] = 0.0;
            a.column_mut(j).assign(&ndarray::ArrayView1::from(&col));
        }
    } else {
        let (mut e, mut row) = (vec![0.0; n], vec![0.0; p]);
        for i in 0..n {
            e[i] = 1.0;
            op.apply_transpose(&e, &mut row);
            e[i] = 0.0;
            a.row_mut(i).assign(&ndarray::ArrayView1::from(&row));
        }
    }
    let svd = sorted_svd(&a)?;
    let mut right = svd.right;
    let mut left = svd.left;
    for j in 0..k {
        let col = right.column(j);
        let imax = (0..p).max_by(|&x, &y| col[x].abs().total_cmp(&col[y].abs())).unwrap_or(0);
        if col[imax] < 0.0 {
            right.column_mut(j).mapv_inplace(|v| -v);
            left.column_mut(j).mapv_inplace(|v| -v);
        }
    }
    Ok(SingularTriplets {
        values: svd.values,
        right_vectors: right,
        left_vectors: left,
        residuals: vec![0.0; k],
        restarts: 0,
        matvecs: k,
        basis_size: k,
        converged: true,
    })
}

/// A single Lanczos sweep of size `m` from a seeded random start.
pub fn lanczos_sweep<O: LinearOperator + ?Sized>(op: &O, m: usize, seed: u64) -> Result<BidiagonalSystem> {
    let kmax = op.nrows().min(op.ncols());
    if m == 0 || m > kmax {
        return Err(FadError::InvalidArgument(format!(
            "basis size {m} outside 1..={kmax}"
        )));
    }
    let mut sw = Sweeper {
        op,
        rng: ChaCha8Rng::seed_from_u64(seed),
        matvecs: 0,
    };
    let mut sys = fresh_system(&mut sw, m);
    sw.extend(&mut sys, 0);
    Ok(sys)
}

fn fresh_system<O: LinearOperator + ?Sized>(sw: &mut Sweeper<'_, O>, m: usize) -> BidiagonalSystem {
    let f1 = sw.random_unit(sw.op.nrows(), &[]);
    BidiagonalSystem {
        b: Array2::zeros((m, m)),
        f: vec![f1],
        g: Vec::with_capacity(m),
        r: Vec::new(),
        beta_m: 0.0,
        norm_est: 0.0,
    }
}

/// Leading `q` singular triplets of `op`.
///
/// Returns `converged = false` with the last Ritz approximations if the
/// residual test still fails after `max_restarts` restarts. When `q` equals
/// `min(n, p)` there is no room for a restart vector and the operator is
/// materialized along its short side instead.
pub fn partial_svd<O: LinearOperator + ?Sized>(op: &O, q: usize, cfg: &SvdConfig) -> Result<SingularTriplets> {
    validate(op, q, cfg)?;
    let (n, p) = (op.nrows(), op.ncols());
    if q == n.min(p) {
        return full_svd(op);
    }
    let m = cfg
        .basis_size
        .unwrap_or_else(|| basis_size(q, n, p))
        .clamp(q + 1, n.min(p));

    let mut sw = Sweeper {
        op,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        matvecs: 0,
    };
    let mut sys = fresh_system(&mut sw, m);
    let mut k = 0;
    let mut restarts = 0;
    loop {
        sw.extend(&mut sys, k);
        let svd = sorted_svd(&sys.b)?;
        let h1 = svd.values[0];
        sys.norm_est = sys.norm_est.max(h1);
        let last_row: Vec<f64> = svd.left.row(m - 1).to_vec();
        let residuals = ritz_residuals(sys.beta_m, &last_row, q);
        let converged = residuals.iter().all(|&r| r <= h1 * cfg.delta);

        // Ritz vectors: v_j = G P_j (p), u_j = F Q_j (n)
        let ritz = |basis: &[Vec<f64>], coef: &Array2<f64>, j: usize, len: usize| {
            let mut out = vec![0.0; len];
            for (i, b) in basis.iter().enumerate() {
                axpy(coef[[i, j]], b, &mut out);
            }
            out
        };
        let vs: Vec<Vec<f64>> = (0..q).map(|j| ritz(&sys.g, &svd.left, j, p)).collect();
        let us: Vec<Vec<f64>> = (0..q).map(|j| ritz(&sys.f[..m], &svd.right, j, n)).collect();

        if converged || restarts >= cfg.max_restarts {
            let mut right = Array2::zeros((p, q));
            let mut left = Array2::zeros((n, q));
            for j in 0..q {
                let imax = vs[j]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                let sign = if vs[j][imax] < 0.0 { -1.0 } else { 1.0 };
                for i in 0..p {
                    right[[i, j]] = sign * vs[j][i];
                }
                for i in 0..n {
                    left[[i, j]] = sign * us[j][i];
                }
            }
            return Ok(SingularTriplets {
                values: svd.values[..q].to_vec(),
                right_vectors: right,
                left_vectors: left,
                residuals,
                restarts,
                matvecs: sw.matvecs,
                basis_size: m,
                converged,
            });
        }

        // restart with the q leading Ritz vectors and the residual direction
        let beta_m = sys.beta_m;
        let r = std::mem::take(&mut sys.r);
        let mut new_f = us;
        let tol = Sweeper::<O>::breakdown_tol(&sys);
        let mut b = Array2::zeros((m, m));
        let f_next = if beta_m > tol {
            let mut f: Vec<f64> = r.iter().map(|v| v / beta_m).collect();
            orthogonalize(&mut f, &new_f);
            let nrm = norm(&f);
            f.iter_mut().for_each(|v| *v /= nrm);
            for j in 0..q {
                b[[j, q]] = beta_m * last_row[j];
            }
            f
        } else {
            sw.random_unit(n, &new_f)
        };
        for j in 0..q {
            b[[j, j]] = svd.values[j];
        }
        new_f.push(f_next);
        sys.f = new_f;
        sys.g = vs;
        sys.b = b;
        k = q;
        restarts += 1;
    }
}
