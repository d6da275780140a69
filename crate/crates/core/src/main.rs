use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use fad_core::em::PsiUpdate;
use fad_core::fad::{FitConfig, StartLoadings};
use fad_core::report::{to_json, FitReport, Method};
use fad_core::selection::{compare_fits, fit, select_q, ComparisonReport, Selection};
use fad_core::sim::{run_experiment, SimConfig, PRESETS};
use fad_core::{partial_svd, DataSet, DenseOperator, FadError, FileFormat, ImplicitW, ScaleMode, SvdConfig};

const SCHEMA: u32 = 1;

/// Maximum-likelihood exploratory factor analysis for wide data.
#[derive(Parser, Serialize)]
#[command(name = "fad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Serialize)]
struct Global {
    /// Seed for the Lanczos start vectors and the simulator.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads. FAD_THREADS takes precedence; the default is the
    /// available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Zero all wall times so that reports are byte-for-byte reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Exit with status 2 when a reported fit did not converge.
    #[arg(long, global = true)]
    strict: bool,
    /// Output directory. Without it the JSON report goes to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Fit a factor model with a fixed number of factors.
    Fit {
        #[command(flatten)]
        input: Input,
        /// Number of factors.
        #[arg(long, conflicts_with = "max_factors", required_unless_present = "max_factors")]
        q: Option<usize>,
        /// Sweep 1..=K factors and keep the BIC choice, as `select` does.
        #[arg(long)]
        max_factors: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Fad)]
        method: MethodArg,
        /// Scale of the reported estimates and log-likelihood.
        #[arg(long, value_enum, default_value_t = ScaleArg::Correlation)]
        scale: ScaleArg,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Fit 1..=K factors and choose the count by BIC.
    Select {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        max_factors: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Fad)]
        method: MethodArg,
        #[arg(long, value_enum, default_value_t = ScaleArg::Correlation)]
        scale: ScaleArg,
        /// Also write a method-by-k CSV table here.
        #[arg(long)]
        table: Option<PathBuf>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Fit with both methods at one factor count and report their differences.
    Compare {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        q: usize,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Run a simulation experiment.
    Simulate {
        #[arg(long, default_value = "paper-small", value_parser = clap::builder::PossibleValuesParser::new(PRESETS))]
        preset: String,
        #[arg(long)]
        replicates: Option<usize>,
        /// Methods to run; defaults to the preset's.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        max_factors: Option<usize>,
        #[command(flatten)]
        tuning: Tuning,
    },
    /// Leading singular triplets of a data matrix.
    Psvd {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        q: usize,
        #[arg(long, default_value_t = SvdConfig::default().delta)]
        delta: f64,
        #[arg(long, default_value_t = SvdConfig::default().max_restarts)]
        max_restarts: usize,
        /// Lanczos basis size; defaults to max(2q + 1, 20).
        #[arg(long)]
        basis_size: Option<usize>,
        #[arg(long, value_enum, default_value_t = OperatorArg::Centered)]
        operator: OperatorArg,
    },
}

#[derive(Args, Serialize)]
struct Input {
    /// Data matrix with observations in rows. `.csv` and `.txt` files are read
    /// as CSV, anything else as the binary matrix format.
    #[arg(long, short)]
    input: PathBuf,
    /// The CSV file starts with a header row.
    #[arg(long)]
    header: bool,
}

impl Input {
    fn load(&self) -> Result<DataSet, FadError> {
        DataSet::ingest(&self.input, FileFormat::from_path(&self.input, self.header))
    }
}

#[derive(Args, Serialize)]
struct Tuning {
    #[arg(long, default_value_t = FitConfig::default().psi_lo)]
    psi_lo: f64,
    #[arg(long, default_value_t = FitConfig::default().psi_hi)]
    psi_hi: f64,
    /// L-BFGS-B iteration limit.
    #[arg(long, default_value_t = FitConfig::default().lbfgsb.max_iter)]
    max_iter: usize,
    /// Relative objective change for L-BFGS-B convergence.
    #[arg(long, default_value_t = FitConfig::default().lbfgsb.f_rtol)]
    f_rtol: f64,
    /// Projected-gradient tolerance, shared by both methods.
    #[arg(long, default_value_t = FitConfig::default().lbfgsb.g_tol)]
    g_tol: f64,
    #[arg(long, default_value_t = FitConfig::default().lbfgsb.memory)]
    lbfgs_memory: usize,
    /// Relative Ritz residual tolerance of the partial SVD.
    #[arg(long, default_value_t = SvdConfig::default().delta)]
    delta: f64,
    #[arg(long, default_value_t = FitConfig::default().em.max_iter)]
    em_max_iter: usize,
    /// Relative log-likelihood change that triggers EM's gradient check.
    #[arg(long, default_value_t = FitConfig::default().em.rtol)]
    em_rtol: f64,
    #[arg(long, value_enum, default_value_t = StartArg::Scaled)]
    start: StartArg,
    #[arg(long, value_enum, default_value_t = PsiUpdateArg::Standard, hide = true)]
    psi_update: PsiUpdateArg,
}

impl Tuning {
    fn config(&self, seed: u64) -> FitConfig {
        let mut cfg = FitConfig {
            psi_lo: self.psi_lo,
            psi_hi: self.psi_hi,
            start: match self.start {
                StartArg::Scaled => StartLoadings::Scaled,
                StartArg::Directions => StartLoadings::Directions,
            },
            ..FitConfig::default()
        };
        cfg.lbfgsb.max_iter = self.max_iter;
        cfg.lbfgsb.f_rtol = self.f_rtol;
        cfg.lbfgsb.g_tol = self.g_tol;
        cfg.lbfgsb.memory = self.lbfgs_memory;
        cfg.svd.delta = self.delta;
        cfg.svd.seed = seed;
        cfg.em.max_iter = self.em_max_iter;
        cfg.em.rtol = self.em_rtol;
        cfg.em.g_tol = self.g_tol;
        cfg.em.psi_update = match self.psi_update {
            PsiUpdateArg::Standard => PsiUpdate::Standard,
            PsiUpdateArg::Literal => PsiUpdate::Literal,
        };
        cfg
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Fad,
    Em,
    Both,
}

impl MethodArg {
    fn methods(self) -> Vec<Method> {
        match self {
            MethodArg::Fad => vec![Method::Fad],
            MethodArg::Em => vec![Method::Em],
            MethodArg::Both => vec![Method::Fad, Method::Em],
        }
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScaleArg {
    Correlation,
    Covariance,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StartArg {
    Scaled,
    Directions,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum PsiUpdateArg {
    Standard,
    Literal,
}

/// The matrix handed to `psvd`.
#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OperatorArg {
    /// The data as stored.
    Raw,
    /// `n^{-1/2} (Y - 1 mean^T)`.
    Centered,
    /// Centered with unit-variance columns.
    Correlation,
}

struct Outcome {
    report: Value,
    converged: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a reported fit did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn thread_count(requested: Option<usize>) -> Result<usize, FadError> {
    let from_env = match std::env::var("FAD_THREADS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| FadError::InvalidArgument(format!("FAD_THREADS must be a count, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let n = from_env
        .or(requested)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(FadError::InvalidArgument("thread count must be positive".into()));
    }
    Ok(n)
}

/// Returns whether the strictness requirement held.
fn run(cli: &Cli) -> Result<bool, FadError> {
    let threads = thread_count(cli.global.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FadError::InvalidArgument(format!("cannot start thread pool: {e}")))?;
    let outcome = pool.install(|| dispatch(cli))?;

    let mut report = json!({
        "schema": SCHEMA,
        "version": env!("CARGO_PKG_VERSION"),
        "config": { "threads": threads, "args": cli },
    });
    if let (Value::Object(head), Value::Object(body)) = (&mut report, outcome.report) {
        head.extend(body);
    }
    let text = to_json(&report)?;
    match &cli.global.out {
        Some(dir) => write_file(&dir.join("report.json"), &text)?,
        None => print!("{text}"),
    }
    Ok(outcome.converged || !cli.global.strict)
}

fn dispatch(cli: &Cli) -> Result<Outcome, FadError> {
    let g = &cli.global;
    match &cli.command {
        Command::Fit {
            input,
            q,
            max_factors,
            method,
            scale,
            tuning,
        } => {
            let data = input.load()?;
            let cfg = tuning.config(g.seed);
            match (q, max_factors) {
                (Some(q), _) => run_fit(&data, *q, *method, *scale, &cfg, g),
                (None, Some(k)) => run_select(&data, *k, *method, *scale, None, &cfg, g),
                (None, None) => unreachable!("clap requires one of --q and --max-factors"),
            }
        }
        Command::Select {
            input,
            max_factors,
            method,
            scale,
            table,
            tuning,
        } => {
            let data = input.load()?;
            let cfg = tuning.config(g.seed);
            run_select(&data, *max_factors, *method, *scale, table.as_deref(), &cfg, g)
        }
        Command::Compare { input, q, tuning } => {
            let data = input.load()?;
            let cfg = tuning.config(g.seed);
            let mut fad = fit(&data, *q, Method::Fad, &cfg)?;
            let mut em = fit(&data, *q, Method::Em, &cfg)?;
            if g.deterministic {
                fad.strip_timing();
                em.strip_timing();
            }
            let mut cmp = compare_fits(&fad, &em, None)?;
            if g.deterministic {
                cmp.speed_ratio = 0.0;
            }
            let converged = fad.converged && em.converged;
            Ok(Outcome {
                report: json!({ "comparison": cmp, "fits": [summary(&fad), summary(&em)] }),
                converged,
            })
        }
        Command::Simulate {
            preset,
            replicates,
            method,
            max_factors,
            tuning,
        } => {
            let mut cfg = SimConfig::preset(preset).expect("clap restricts presets");
            cfg.seed = g.seed;
            cfg.fit = tuning.config(g.seed);
            if let Some(r) = replicates {
                cfg.replicates = *r;
            }
            if let Some(m) = method {
                cfg.methods = m.methods();
            }
            if let Some(k) = max_factors {
                cfg.k_max = *k;
            }
            let mut report = run_experiment(&cfg)?;
            if g.deterministic {
                report.strip_timing();
            }
            if let Some(dir) = &g.out {
                fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
                report.write_errors_csv(&dir.join("errors.csv"))?;
                report.write_timings_csv(&dir.join("timings.csv"))?;
            }
            let converged = report.failures.is_empty()
                && report.replicates.iter().all(|r| r.selections.iter().all(|s| s.best().converged));
            Ok(Outcome {
                report: serde_json::to_value(&report)?,
                converged,
            })
        }
        Command::Psvd {
            input,
            q,
            delta,
            max_restarts,
            basis_size,
            operator,
        } => {
            let data = input.load()?;
            let cfg = SvdConfig {
                delta: *delta,
                max_restarts: *max_restarts,
                seed: g.seed,
                basis_size: *basis_size,
            };
            let limit = data.n().min(data.p());
            if *q == 0 || *q > limit {
                return Err(FadError::InvalidArgument(format!("q must lie in 1..={limit}, got {q}")));
            }
            let trip = match operator {
                OperatorArg::Raw => partial_svd(&DenseOperator::new(data.values().clone()), *q, &cfg)?,
                OperatorArg::Centered => partial_svd(&ImplicitW::unweighted(&data, ScaleMode::Covariance), *q, &cfg)?,
                OperatorArg::Correlation => {
                    partial_svd(&ImplicitW::unweighted(&data, ScaleMode::Correlation), *q, &cfg)?
                }
            };
            Ok(Outcome {
                report: json!({
                    "n": data.n(),
                    "p": data.p(),
                    "q": q,
                    "values": trip.values,
                    "residuals": trip.residuals,
                    "restarts": trip.restarts,
                    "matvecs": trip.matvecs,
                    "basis_size": trip.basis_size,
                    "converged": trip.converged,
                }),
                converged: trip.converged,
            })
        }
    }
}

fn run_fit(
    data: &DataSet,
    q: usize,
    method: MethodArg,
    scale: ScaleArg,
    cfg: &FitConfig,
    g: &Global,
) -> Result<Outcome, FadError> {
    let mut reports = method
        .methods()
        .into_iter()
        .map(|m| fit(data, q, m, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    if g.deterministic {
        reports.iter_mut().for_each(FitReport::strip_timing);
    }
    let mut comparison = match reports.as_slice() {
        [a, b] => Some(compare_fits(a, b, None)?),
        _ => None,
    };
    if let (Some(c), true) = (&mut comparison, g.deterministic) {
        c.speed_ratio = 0.0;
    }
    let converged = reports.iter().all(|r| r.converged);
    let reports = rescale(reports, data, scale);

    let dir = g.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let single = reports.len() == 1;
    let mut files = Vec::new();
    for r in &reports {
        let suffix = if single { String::new() } else { format!("_{}", r.method) };
        let loadings = dir.join(format!("loadings{suffix}.csv"));
        let uniquenesses = dir.join(format!("uniquenesses{suffix}.csv"));
        write_loadings(&loadings, r)?;
        write_uniquenesses(&uniquenesses, r)?;
        files.push(json!({ "method": r.method, "loadings": loadings, "uniquenesses": uniquenesses }));
    }
    Ok(Outcome {
        report: json!({ "fits": reports, "files": files, "comparison": comparison }),
        converged,
    })
}

fn run_select(
    data: &DataSet,
    k_max: usize,
    method: MethodArg,
    scale: ScaleArg,
    table: Option<&Path>,
    cfg: &FitConfig,
    g: &Global,
) -> Result<Outcome, FadError> {
    let mut selections = method
        .methods()
        .into_iter()
        .map(|m| select_q(data, k_max, m, cfg))
        .collect::<Result<Vec<Selection>, _>>()?;
    if g.deterministic {
        for s in &mut selections {
            s.reports.iter_mut().for_each(FitReport::strip_timing);
        }
    }
    let comparisons = match selections.as_slice() {
        [a, b] => (1..=k_max)
            .filter_map(|k| Some((a.report(k)?, b.report(k)?)))
            .map(|(x, y)| {
                compare_fits(x, y, None).map(|mut c| {
                    if g.deterministic {
                        c.speed_ratio = 0.0;
                    }
                    c
                })
            })
            .collect::<Result<Vec<ComparisonReport>, _>>()?,
        _ => Vec::new(),
    };
    let converged = selections.iter().all(|s| s.best().converged);
    for s in &mut selections {
        s.reports = rescale(std::mem::take(&mut s.reports), data, scale);
    }
    if let Some(path) = table {
        write_table(path, &selections, k_max)?;
    }
    let chosen: Vec<Value> = selections
        .iter()
        .map(|s| json!({ "method": s.method, "q": s.q_best }))
        .collect();
    Ok(Outcome {
        report: json!({ "chosen": chosen, "selections": selections, "comparisons": comparisons }),
        converged,
    })
}

fn rescale(reports: Vec<FitReport>, data: &DataSet, scale: ScaleArg) -> Vec<FitReport> {
    match scale {
        ScaleArg::Correlation => reports,
        ScaleArg::Covariance => reports.iter().map(|r| r.to_covariance(data)).collect(),
    }
}

/// Scalar fields of a fit, without the estimates.
fn summary(r: &FitReport) -> Value {
    json!({
        "method": r.method,
        "q": r.q,
        "loglik": r.loglik,
        "bic": r.bic,
        "grad_inf_norm": r.grad_inf_norm,
        "score_residual": r.score_residual,
        "iterations": r.iterations,
        "lanczos_calls": r.lanczos_calls,
        "wall_time_seconds": r.wall_time_seconds,
        "status": r.status,
        "converged": r.converged,
        "hit_max_iter": r.hit_max_iter,
    })
}

/// Methods in rows, `k = 1..=k_max` in columns, one block per metric.
fn write_table(path: &Path, selections: &[Selection], k_max: usize) -> Result<(), FadError> {
    let mut out = String::from("metric,method");
    for k in 1..=k_max {
        out.push_str(&format!(",k{k}"));
    }
    out.push('\n');
    let metrics: [(&str, fn(&FitReport) -> String); 4] = [
        ("wall_time_seconds", |r| format!("{:.16e}", r.wall_time_seconds)),
        ("bic", |r| format!("{:.16e}", r.bic)),
        ("iterations", |r| r.iterations.to_string()),
        ("converged", |r| r.converged.to_string()),
    ];
    for (name, cell) in metrics {
        for s in selections {
            out.push_str(&format!("{name},{}", s.method));
            for k in 1..=k_max {
                out.push(',');
                if let Some(r) = s.report(k) {
                    out.push_str(&cell(r));
                }
            }
            out.push('\n');
        }
    }
    write_file(path, &out)
}

fn write_loadings(path: &Path, r: &FitReport) -> Result<(), FadError> {
    let lambda = r.lambda_hat.as_array();
    let mut out = (1..=r.q).map(|k| format!("factor{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in lambda.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

fn write_uniquenesses(path: &Path, r: &FitReport) -> Result<(), FadError> {
    let mut out = String::from("psi\n");
    for v in &r.psi_hat {
        out.push_str(&format!("{v:.16e}\n"));
    }
    write_file(path, &out)
}

fn write_file(path: &Path, text: &str) -> Result<(), FadError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> FadError {
    FadError::Io {
        path: path.to_path_buf(),
        source,
    }
}
