//! Observation matrix storage and file ingestion.
//!
//! A [`DataSet`] holds the `n x p` matrix once, row-major, together with the
//! column means and divisor-`n` standard deviations. Nothing larger than
//! `O(n + p)` is ever derived from it; see [`crate::operator`] for the
//! implicit centred and scaled operator built on top.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{FadError, Result};

const MAGIC: &[u8; 4] = b"FADM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Csv { header: bool },
    Binary,
}

impl FileFormat {
    /// Picks the format from the file extension: `.csv`/`.txt` are CSV,
    /// everything else is the binary matrix format.
    pub fn from_path(path: &Path, header: bool) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") | Some("txt") => FileFormat::Csv { header },
            _ => FileFormat::Binary,
        }
    }
}

/// `n x p` data matrix (rows are observations) with cached column moments.
#[derive(Debug, Clone)]
pub struct DataSet {
    values: Array2<f64>,
    col_mean: Vec<f64>,
    col_sd: Vec<f64>,
}

impl DataSet {
    /// Validates the matrix and caches column means and standard deviations.
    ///
    /// The standard deviation uses divisor `n`, matching the maximum-likelihood
    /// sample covariance.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (n, p) = values.dim();
        if n < 2 {
            return Err(FadError::InvalidArgument(format!(
                "need at least 2 observations, got {n}"
            )));
        }
        if p < 1 {
            return Err(FadError::InvalidArgument("need at least 1 column".into()));
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        for ((i, j), v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(FadError::NonFinite { row: i + 1, col: j + 1 });
            }
        }

        let mut col_mean = vec![0.0; p];
        for row in values.rows() {
            for (m, &y) in col_mean.iter_mut().zip(row.iter()) {
                *m += y;
            }
        }
        let nf = n as f64;
        col_mean.iter_mut().for_each(|m| *m /= nf);

        let mut ss = vec![0.0; p];
        let mut max_abs = vec![0.0f64; p];
        for row in values.rows() {
            for j in 0..p {
                let d = row[j] - col_mean[j];
                ss[j] += d * d;
                max_abs[j] = max_abs[j].max(row[j].abs());
            }
        }
        let col_sd: Vec<f64> = ss.iter().map(|s| (s / nf).sqrt()).collect();
        for j in 0..p {
            // a constant column leaves only rounding noise of order eps * |value|
            if col_sd[j] <= 16.0 * f64::EPSILON * max_abs[j] || col_sd[j] == 0.0 {
                return Err(FadError::ConstantColumn { col: j + 1 });
            }
        }

        Ok(Self {
            values,
            col_mean,
            col_sd,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Row-major contiguous view of the observations.
    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("DataSet values are stored in standard layout")
    }

    pub fn col_mean(&self) -> &[f64] {
        &self.col_mean
    }

    /// Divisor-`n` column standard deviations.
    pub fn col_sd(&self) -> &[f64] {
        &self.col_sd
    }

    /// Divisor-`n - 1` standard deviations, for reporting only.
    pub fn col_sd_unbiased(&self) -> Vec<f64> {
        let n = self.n() as f64;
        let f = (n / (n - 1.0)).sqrt();
        self.col_sd.iter().map(|s| s * f).collect()
    }

    pub fn ingest(path: impl AsRef<Path>, format: FileFormat) -> Result<Self> {
        let path = path.as_ref();
        match format {
            FileFormat::Csv { header } => read_csv(path, header),
            FileFormat::Binary => read_binary(path),
        }
    }

    /// Writes the `FADM` binary format: magic, `u32` version, `u64` n, `u64` p,
    /// then `n * p` little-endian `f64` in row-major order.
    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        write_binary(path.as_ref(), &self.values)
    }
}

pub fn write_binary(path: &Path, values: &Array2<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| FadError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (n, p) = values.dim();
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| FadError::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(n as u64).to_le_bytes())?;
    put(&(p as u64).to_le_bytes())?;
    for v in values.iter() {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| FadError::io(path, e))
}

fn read_binary(path: &Path) -> Result<DataSet> {
    let file = File::open(path).map_err(|e| FadError::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut header = [0u8; 24];
    r.read_exact(&mut header)
        .map_err(|_| FadError::BadBinary("file shorter than the 24-byte header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(FadError::BadBinary("missing FADM magic".into()));
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(FadError::BadBinary(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
    let p = u64::from_le_bytes(header[16..24].try_into().unwrap()) as usize;
    let len = n
        .checked_mul(p)
        .ok_or_else(|| FadError::BadBinary("n * p overflows".into()))?;

    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| FadError::io(path, e))?;
    if bytes.len() != len * 8 {
        return Err(FadError::BadBinary(format!(
            "expected {} payload bytes for {n}x{p}, found {}",
            len * 8,
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((n, p), data)
        .map_err(|e| FadError::BadBinary(e.to_string()))?;
    DataSet::new(values)
}

fn read_csv(path: &Path, header: bool) -> Result<DataSet> {
    let file = File::open(path).map_err(|e| FadError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut data = Vec::new();
    let mut p = None;
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        // report 1-based file lines, counting the header if present
        let row = i + 1 + usize::from(header);
        let record = record.map_err(|e| FadError::Parse {
            row,
            col: 0,
            msg: e.to_string(),
        })?;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        match p {
            None => p = Some(record.len()),
            Some(p) if p != record.len() => {
                return Err(FadError::Parse {
                    row,
                    col: record.len(),
                    msg: format!("expected {p} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| FadError::Parse {
                row,
                col: j + 1,
                msg: format!("cannot parse {field:?} as a number"),
            })?;
            data.push(v);
        }
        n += 1;
    }
    let p = p.ok_or_else(|| FadError::Parse {
        row: 0,
        col: 0,
        msg: "no data rows".into(),
    })?;
    let values = Array2::from_shape_vec((n, p), data).expect("row lengths checked");
    DataSet::new(values)
}
