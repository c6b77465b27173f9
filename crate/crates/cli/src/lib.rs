//! Command-line harness for the `aqn` solvers: problem construction, method
//! selection, deterministic runs and CSV/JSON trace output.

pub mod spec;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use aqn::oracle::{self, gaussian_matrix};
use aqn::solver::{type1_iterate, type2_iterate};
use aqn::{accel_outer, run_gd, run_lbfgs, run_nesterov, BaselineConfig, IterationTrace, Oracle, SolverConfig};
use serde::Serialize;
use thiserror::Error;

pub use spec::{apply_method_descriptor, derive_seed, parse_config, Loss, Method, ProblemSpec, RunSpec, Settings};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Input { path: PathBuf, message: String },
    #[error(transparent)]
    Solver(aqn::Error),
}

impl CliError {
    /// Process exit status: 2 for bad flags, 3 for I/O, 1 for solver errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } | CliError::Input { .. } => 3,
            CliError::Solver(_) => 1,
        }
    }

    fn io(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.to_path_buf(), source }
    }
}

impl From<aqn::Error> for CliError {
    fn from(e: aqn::Error) -> Self {
        match e {
            aqn::Error::InvalidConfig(msg) => CliError::Usage(msg),
            other => CliError::Solver(other),
        }
    }
}

/// Reads a config file into settings.
pub fn read_config(path: &Path) -> Result<Settings, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    parse_config(&text)
}

fn problem_seed(spec: &RunSpec, own: Option<u64>) -> u64 {
    own.unwrap_or_else(|| derive_seed(spec.seed, "problem"))
}

/// Builds the oracle described by `spec.problem`.
pub fn build_oracle(spec: &RunSpec) -> Result<Oracle, CliError> {
    let oracle = match &spec.problem {
        ProblemSpec::Quadratic { d, m, seed } => {
            let ab = gaussian_matrix(*m, d + 1, problem_seed(spec, *seed));
            oracle::make_quadratic(ab.columns(0, *d).into_owned(), ab.column(*d).into_owned())?
        }
        ProblemSpec::Logistic { n, d, reg, seed } => {
            let mut data = aqn::Dataset::synthetic(*n, *d, problem_seed(spec, *seed));
            data.preprocess();
            oracle::make_logistic(&data, *reg)?
        }
        ProblemSpec::Rosenbrock { d } => oracle::make_rosenbrock(*d)?,
        ProblemSpec::CubicLs { d, m, c, seed } => {
            let ab = gaussian_matrix(*m, d + 1, problem_seed(spec, *seed));
            oracle::make_cubic_regularized_ls(ab.columns(0, *d).into_owned(), ab.column(*d).into_owned(), *c)?
        }
        ProblemSpec::Libsvm { loss, reg, path } => {
            let data = oracle::load_libsvm(path).map_err(|e| match e {
                aqn::Error::Io(source) => CliError::Io { path: path.clone(), source },
                other => CliError::Input { path: path.clone(), message: other.to_string() },
            })?;
            let built = match loss {
                Loss::Logistic => oracle::make_logistic(&data, *reg),
                Loss::Square => {
                    let norm = oracle::spectral_norm_estimate(&data.features, 30);
                    oracle::make_cubic_regularized_ls(data.features, data.labels, reg * norm * norm)
                }
            };
            built.map_err(|e| CliError::Input { path: path.clone(), message: e.to_string() })?
        }
    };
    Ok(oracle)
}

pub fn solver_config(spec: &RunSpec) -> SolverConfig {
    SolverConfig {
        rule: spec.rule,
        n: spec.n,
        h: spec.h,
        kappa_max: spec.kappa_max,
        grad_tol: spec.tol,
        max_outer: spec.max_iter,
        max_oracle_calls: spec.max_calls,
        m0: spec.m0,
        tau: spec.tau,
        seed: derive_seed(spec.seed, &format!("memory/{}", spec.label())),
        ..SolverConfig::default()
    }
}

pub fn baseline_config(spec: &RunSpec) -> BaselineConfig {
    let defaults = BaselineConfig::default();
    BaselineConfig {
        grad_tol: spec.tol,
        max_outer: spec.max_iter,
        max_oracle_calls: spec.max_calls,
        l0: spec.m0.unwrap_or(defaults.l0),
        lbfgs_memory: spec.lbfgs_memory,
        ..defaults
    }
}

/// Builds the problem and runs the method. Starts at `∇f(0)`.
pub fn execute(spec: &RunSpec) -> Result<IterationTrace, CliError> {
    let oracle = build_oracle(spec)?;
    let trace = match spec.method {
        Method::Type1 => type1_iterate(&oracle, &solver_config(spec))?.trace,
        Method::Type2 => type2_iterate(&oracle, &solver_config(spec))?.trace,
        Method::Accel => accel_outer(&oracle, &solver_config(spec))?.trace,
        Method::Gd => run_gd(&oracle, &baseline_config(spec))?.trace,
        Method::Nesterov => run_nesterov(&oracle, &baseline_config(spec))?.trace,
        Method::Lbfgs => run_lbfgs(&oracle, &baseline_config(spec))?.trace,
    };
    Ok(trace)
}

/// Writes the trace CSV to `path`.
pub fn write_trace(trace: &IterationTrace, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(CliError::io(path))?;
    let mut w = BufWriter::new(file);
    trace.write_csv(&mut w).and_then(|()| w.flush()).map_err(CliError::io(path))
}

/// One-line description of a finished run.
pub fn describe(label: &str, trace: &IterationTrace) -> String {
    match trace.last() {
        Some(r) => format!(
            "{label}: {} after {} iterations, f = {:e}, |grad| = {:e}, {} gradient calls",
            trace.stop, r.t, r.f, r.grad_norm, r.oracle_calls
        ),
        None => format!("{label}: no iterations"),
    }
}

/// `run`: executes one spec and writes its trace to `spec.out`, or to
/// `stdout` when no path is set.
pub fn cli_run(settings: &Settings) -> Result<IterationTrace, CliError> {
    let spec = RunSpec::from_settings(settings)?;
    let trace = execute(&spec)?;
    match &spec.out {
        Some(path) => write_trace(&trace, path)?,
        None => {
            let stdout = io::stdout();
            trace.write_csv(stdout.lock()).map_err(CliError::io(Path::new("<stdout>")))?;
        }
    }
    eprintln!("{}", describe(&spec.label(), &trace));
    Ok(trace)
}

/// Row of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub oracle_calls_to_tol: Option<usize>,
    pub final_f: f64,
    pub final_grad_norm: f64,
}

impl SummaryRow {
    pub fn new(method: String, trace: &IterationTrace, tol: f64) -> Self {
        let last = trace.last();
        Self {
            method,
            oracle_calls_to_tol: trace.oracle_calls_to(tol),
            final_f: last.map_or(f64::NAN, |r| r.f),
            final_grad_norm: last.map_or(f64::NAN, |r| r.grad_norm),
        }
    }
}

/// Sorts by calls to tolerance, methods that never reached it last. The
/// sort is stable so ties keep the command-line order.
pub fn rank(rows: &mut [SummaryRow]) {
    rows.sort_by_key(|r| (r.oracle_calls_to_tol.is_none(), r.oracle_calls_to_tol));
}

/// Trace file stems, with `-2`, `-3`, ... appended to repeated labels.
pub fn unique_labels(specs: &[RunSpec]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(specs.len());
    for spec in specs {
        let base = spec.label();
        let mut label = base.clone();
        let mut k = 2;
        while out.contains(&label) {
            label = format!("{base}-{k}");
            k += 1;
        }
        out.push(label);
    }
    out
}

/// `compare`: runs every method on the shared settings in parallel, writes
/// `<label>.csv` per method and a ranked `summary.json` to `out_dir`.
pub fn cli_compare(base: &Settings, methods: &[String], out_dir: &Path) -> Result<Vec<SummaryRow>, CliError> {
    if methods.len() < 2 {
        return Err(CliError::Usage(format!("compare needs at least 2 methods, got {}", methods.len())));
    }
    let specs = methods
        .iter()
        .map(|m| RunSpec::from_settings(&apply_method_descriptor(base, m)?))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = unique_labels(&specs);
    fs::create_dir_all(out_dir).map_err(CliError::io(out_dir))?;

    let results: Vec<Result<IterationTrace, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = specs.iter().map(|spec| scope.spawn(move || execute(spec))).collect();
        handles.into_iter().map(|h| h.join().expect("solver thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(specs.len());
    for ((spec, label), result) in specs.iter().zip(&labels).zip(results) {
        let trace = result?;
        write_trace(&trace, &out_dir.join(format!("{label}.csv")))?;
        eprintln!("{}", describe(label, &trace));
        rows.push(SummaryRow::new(label.clone(), &trace, spec.tol));
    }
    rank(&mut rows);
    let path = out_dir.join("summary.json");
    let json = serde_json::to_string_pretty(&rows).expect("summary rows serialize");
    fs::write(&path, json + "\n").map_err(CliError::io(&path))?;
    Ok(rows)
}
