//! Small dense helpers for `m x m` and `q x q` problems. Everything here is
//! sized by the basis or factor count, never by `n` or `p`.

use faer::linalg::solvers::DenseSolveCore;
use faer::{Mat, MatRef, Side};
use ndarray::Array2;

use crate::error::{FadError, Result};

fn to_faer(a: &Array2<f64>) -> Mat<f64> {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_faer(a: MatRef<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Thin SVD with singular values in nonincreasing order.
pub(crate) struct SortedSvd {
    pub values: Vec<f64>,
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

pub(crate) fn sorted_svd(a: &Array2<f64>) -> Result<SortedSvd> {
    let svd = to_faer(a).thin_svd().map_err(|_| FadError::SvdNotConverged {
        restarts: 0,
        max_residual: f64::NAN,
    })?;
    Ok(SortedSvd {
        values: svd.S().column_vector().iter().copied().collect(),
        left: from_faer(svd.U()),
        right: from_faer(svd.V()),
    })
}

/// Symmetric eigendecomposition with eigenvalues in nonincreasing order.
pub(crate) fn sym_eig_desc(a: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let k = a.nrows();
    let eig = to_faer(a)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| FadError::Singular { dim: k, context: "symmetric eigendecomposition" })?;
    let (s, u) = (eig.S().column_vector(), eig.U());
    let vals = (0..k).rev().map(|i| s[i]).collect();
    let vecs = Array2::from_shape_fn((k, k), |(r, c)| u[(r, k - 1 - c)]);
    Ok((vals, vecs))
}

/// Inverse and log-determinant of a symmetric positive-definite matrix.
pub(crate) fn spd_inverse_logdet(a: &Array2<f64>, context: &'static str) -> Result<(Array2<f64>, f64)> {
    let k = a.nrows();
    let chol = to_faer(a)
        .llt(Side::Lower)
        .map_err(|_| FadError::Singular { dim: k, context })?;
    let l = chol.L();
    let logdet = 2.0 * (0..k).map(|i| l[(i, i)].ln()).sum::<f64>();
    Ok((from_faer(chol.inverse().as_ref()), logdet))
}

/// Upper-triangular `R` of a thin QR factorization, `min(rows, cols) x cols`.
pub(crate) fn qr_r(a: &Array2<f64>) -> Array2<f64> {
    from_faer(to_faer(a).qr().thin_R())
}

/// `a^{-1}` for a general square matrix via LU with partial pivoting.
pub(crate) fn inverse(a: &Array2<f64>, context: &'static str) -> Result<Array2<f64>> {
    let k = a.nrows();
    let inv = from_faer(to_faer(a).partial_piv_lu().inverse().as_ref());
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(FadError::Singular { dim: k, context })
    }
}
