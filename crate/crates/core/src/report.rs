use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::data::DataSet;
use crate::error::{FadError, Result};
use crate::lbfgsb::Status;
use crate::operator::ScaleMode;
use crate::profile::{rescale_to_covariance, Loadings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fad,
    Em,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Fad => "fad",
            Method::Em => "em",
        })
    }
}

impl FromStr for Method {
    type Err = FadError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "fad" => Ok(Method::Fad),
            "em" => Ok(Method::Em),
            _ => Err(FadError::InvalidArgument(format!("unknown method '{s}'"))),
        }
    }
}

/// `-2 loglik + p k log n`.
pub fn bic(loglik: f64, n: usize, p: usize, k: usize) -> f64 {
    -2.0 * loglik + (p * k) as f64 * (n as f64).ln()
}

/// Outcome of one fit at a fixed number of factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub q: usize,
    pub n: usize,
    pub p: usize,
    /// Scale of `loglik`, `psi_hat` and `lambda_hat`.
    pub scale: ScaleMode,
    pub loglik: f64,
    pub bic: f64,
    pub psi_hat: Vec<f64>,
    /// Canonical form: `Gamma` diagonal and nonincreasing.
    pub lambda_hat: Loadings,
    /// Infinity norm of the projected profile gradient at `psi_hat`, on the
    /// correlation scale.
    pub grad_inf_norm: f64,
    /// `max_j |s_jj - (Lambda Lambda^T)_jj - psi_j|` on the correlation scale.
    pub score_residual: f64,
    pub iterations: usize,
    pub objective_calls: usize,
    pub lanczos_calls: usize,
    pub wall_time_seconds: f64,
    pub status: Status,
    pub converged: bool,
    pub hit_max_iter: bool,
    /// EM only: iterations where the log-likelihood dropped beyond
    /// floating-point slack.
    pub monotonicity_violations: usize,
    #[serde(skip)]
    pub loglik_trace: Vec<f64>,
}

impl FitReport {
    /// Reports estimates on the covariance scale of `data`. The log-likelihood
    /// shifts by the Jacobian term `-n sum_j log sd_j`.
    pub fn to_covariance(&self, data: &DataSet) -> FitReport {
        if self.scale == ScaleMode::Covariance {
            return self.clone();
        }
        let (lambda, psi) = rescale_to_covariance(&self.lambda_hat, &self.psi_hat, data);
        let shift = -(self.n as f64) * data.col_sd().iter().map(|s| s.ln()).sum::<f64>();
        let loglik = self.loglik + shift;
        FitReport {
            scale: ScaleMode::Covariance,
            loglik,
            bic: bic(loglik, self.n, self.p, self.q),
            psi_hat: psi,
            lambda_hat: lambda,
            loglik_trace: self.loglik_trace.iter().map(|l| l + shift).collect(),
            ..self.clone()
        }
    }

    /// Zeroes timing fields so reports are reproducible byte for byte.
    pub fn strip_timing(&mut self) {
        self.wall_time_seconds = 0.0;
    }
}

/// Pretty JSON with every float written as `{:.16e}` (17 significant digits),
/// so output bytes do not depend on shortest-representation heuristics.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sci(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

struct Sci(PrettyFormatter<'static>);

impl Formatter for Sci {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(w, value as f64)
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}
