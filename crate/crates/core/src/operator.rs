//! Implicit linear operators.
//!
//! [`ImplicitW`] represents `W = n^{-1/2} (Y - 1 Ybar^T) D^{-1} Psi^{-1/2}` where
//! `D` is the diagonal of column standard deviations in correlation mode and the
//! identity in covariance mode. Centering is applied through the rank-one
//! correction `(Ybar^T v) 1`; neither `W` nor the sample covariance is formed.
//!
//! Both products stream the row-major data once. Each output entry is a fixed
//! sequential sum, so results do not depend on how many threads run the chunks.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DataSet;
use crate::error::{FadError, Result};

const ROW_CHUNK: usize = 32;
const COL_CHUNK: usize = 256;
const PAR_THRESHOLD: usize = 1 << 16;

/// Anything that can multiply by itself and its transpose.
pub trait LinearOperator: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = A x`, with `x.len() == ncols()` and `y.len() == nrows()`.
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `y = A^T x`, with `x.len() == nrows()` and `y.len() == ncols()`.
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Columns divided by their standard deviation; `diag(S) = 1`.
    #[default]
    Correlation,
    Covariance,
}

impl std::str::FromStr for ScaleMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "correlation" => Ok(ScaleMode::Correlation),
            "covariance" => Ok(ScaleMode::Covariance),
            other => Err(format!("unknown scale mode {other:?}")),
        }
    }
}

/// `diag(S)` on the requested scale: all ones for correlation, squared
/// divisor-`n` standard deviations for covariance.
pub fn diag_s(data: &DataSet, mode: ScaleMode) -> Vec<f64> {
    match mode {
        ScaleMode::Correlation => vec![1.0; data.p()],
        ScaleMode::Covariance => data.col_sd().iter().map(|s| s * s).collect(),
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// The centred, scaled data operator for a given `Psi`.
#[derive(Debug, Clone)]
pub struct ImplicitW<'a> {
    data: &'a DataSet,
    psi_inv_sqrt: Vec<f64>,
    col_scale: Vec<f64>,
    mode: ScaleMode,
    inv_sqrt_n: f64,
}

impl<'a> ImplicitW<'a> {
    pub fn new(data: &'a DataSet, psi: &[f64], mode: ScaleMode) -> Result<Self> {
        if psi.len() != data.p() {
            return Err(FadError::Dimension {
                expected: data.p(),
                got: psi.len(),
            });
        }
        if let Some(j) = psi.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(FadError::InvalidArgument(format!(
                "psi[{j}] = {} is not a positive finite number",
                psi[j]
            )));
        }
        let psi_inv_sqrt: Vec<f64> = psi.iter().map(|v| 1.0 / v.sqrt()).collect();
        let col_scale = match mode {
            ScaleMode::Correlation => psi_inv_sqrt
                .iter()
                .zip(data.col_sd())
                .map(|(a, s)| a / s)
                .collect(),
            ScaleMode::Covariance => psi_inv_sqrt.clone(),
        };
        Ok(Self {
            data,
            psi_inv_sqrt,
            col_scale,
            mode,
            inv_sqrt_n: 1.0 / (data.n() as f64).sqrt(),
        })
    }

    /// The operator with `Psi = I`, i.e. the scaled data matrix whose Gram
    /// matrix is `S`.
    pub fn unweighted(data: &'a DataSet, mode: ScaleMode) -> Self {
        Self::new(data, &vec![1.0; data.p()], mode).expect("unit psi is valid")
    }

    pub fn data(&self) -> &DataSet {
        self.data
    }

    pub fn mode(&self) -> ScaleMode {
        self.mode
    }

    pub fn psi_inv_sqrt(&self) -> &[f64] {
        &self.psi_inv_sqrt
    }

    /// Scratch `f64`s allocated by one `w_times` or `wt_times` call.
    pub fn matvec_workspace(&self) -> usize {
        self.data.p()
    }

    pub fn w_times(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(v.len(), self.data.p())?;
        let mut out = vec![0.0; self.data.n()];
        self.apply(v, &mut out);
        Ok(out)
    }

    pub fn wt_times(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_len(u.len(), self.data.n())?;
        let mut out = vec![0.0; self.data.p()];
        self.apply_transpose(u, &mut out);
        Ok(out)
    }

    /// `W T` for a `p x k` block `T`, returning `n x k`.
    pub fn w_times_block(&self, t: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(t.nrows(), self.data.p());
        let mut scaled = t.to_owned();
        for (mut row, &c) in scaled.axis_iter_mut(Axis(0)).zip(&self.col_scale) {
            row *= c;
        }
        let mut out = self.data.values().dot(&scaled);
        let shift = ndarray::ArrayView1::from(self.data.col_mean()).dot(&scaled);
        for mut row in out.axis_iter_mut(Axis(0)) {
            row -= &shift;
            row *= self.inv_sqrt_n;
        }
        out
    }

    /// `W^T U` for an `n x k` block `U`, returning `p x k`.
    pub fn wt_times_block(&self, u: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(u.nrows(), self.data.n());
        let mut out = self.data.values().t().dot(&u);
        let colsum = u.sum_axis(Axis(0));
        for ((mut row, &m), &c) in out
            .axis_iter_mut(Axis(0))
            .zip(self.data.col_mean())
            .zip(&self.col_scale)
        {
            row.scaled_add(-m, &colsum);
            row *= c * self.inv_sqrt_n;
        }
        out
    }
}

fn check_len(got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(FadError::Dimension { expected, got })
    }
}

impl LinearOperator for ImplicitW<'_> {
    fn nrows(&self) -> usize {
        self.data.n()
    }

    fn ncols(&self) -> usize {
        self.data.p()
    }

    fn apply(&self, v: &[f64], out: &mut [f64]) {
        let (n, p) = (self.data.n(), self.data.p());
        assert_eq!(v.len(), p);
        assert_eq!(out.len(), n);
        let t: Vec<f64> = v.iter().zip(&self.col_scale).map(|(a, b)| a * b).collect();
        let shift = dot(self.data.col_mean(), &t);
        let y = self.data.as_slice();
        let s = self.inv_sqrt_n;
        let rows = |(rows, chunk): (&[f64], &mut [f64])| {
            for (row, o) in rows.chunks_exact(p).zip(chunk.iter_mut()) {
                *o = (dot(row, &t) - shift) * s;
            }
        };
        if n * p >= PAR_THRESHOLD {
            y.par_chunks(ROW_CHUNK * p)
                .zip(out.par_chunks_mut(ROW_CHUNK))
                .for_each(rows);
        } else {
            y.chunks(ROW_CHUNK * p)
                .zip(out.chunks_mut(ROW_CHUNK))
                .for_each(rows);
        }
    }

    fn apply_transpose(&self, u: &[f64], out: &mut [f64]) {
        let (n, p) = (self.data.n(), self.data.p());
        assert_eq!(u.len(), n);
        assert_eq!(out.len(), p);
        let usum: f64 = u.iter().sum();
        let y = self.data.as_slice();
        let mean = self.data.col_mean();
        let scale = &self.col_scale;
        let s = self.inv_sqrt_n;
        let cols = |(c, chunk): (usize, &mut [f64])| {
            let lo = c * COL_CHUNK;
            let hi = lo + chunk.len();
            chunk.iter_mut().for_each(|z| *z = 0.0);
            for (i, &ui) in u.iter().enumerate() {
                let row = &y[i * p + lo..i * p + hi];
                for (z, &yij) in chunk.iter_mut().zip(row) {
                    *z += ui * yij;
                }
            }
            for (k, z) in chunk.iter_mut().enumerate() {
                let j = lo + k;
                *z = (*z - mean[j] * usum) * scale[j] * s;
            }
        };
        if n * p >= PAR_THRESHOLD {
            out.par_chunks_mut(COL_CHUNK).enumerate().for_each(cols);
        } else {
            out.chunks_mut(COL_CHUNK).enumerate().for_each(cols);
        }
    }
}

/// An explicit dense matrix viewed as an operator.
#[derive(Debug, Clone)]
pub struct DenseOperator {
    matrix: Array2<f64>,
}

impl DenseOperator {
    pub fn new(matrix: Array2<f64>) -> Self {
        Self {
            matrix: matrix.as_standard_layout().into_owned(),
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl LinearOperator for DenseOperator {
    fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (row, o) in self.matrix.rows().into_iter().zip(y.iter_mut()) {
            *o = dot(row.as_slice().unwrap(), x);
        }
    }

    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (row, &xi) in self.matrix.rows().into_iter().zip(x) {
            for (o, &a) in y.iter_mut().zip(row.iter()) {
                *o += xi * a;
            }
        }
    }
}
