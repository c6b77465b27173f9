//! Type-I and Type-II outer loops with backtracking on the regularization
//! parameter `M`, plus the shared run configuration and trace.

use std::fmt;
use std::io::{self, Write};
use std::time::Instant;

use crate::cubic::{self, CubicModel};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::memory::{DirectionMemory, MemorySnapshot, UpdateRule};
use crate::oracle::{estimate_initial_smoothness, Oracle};
use crate::type2::{self, Type2Problem};

/// Configuration shared by every method in the crate.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub rule: UpdateRule,
    /// Memory capacity `N`.
    pub n: usize,
    /// Forward-estimate step.
    pub h: f64,
    /// Condition-number cap enforced by pruning.
    pub kappa_max: f64,
    pub grad_tol: f64,
    pub max_outer: usize,
    /// Budget on gradient calls.
    pub max_oracle_calls: usize,
    /// Initial regularization; estimated from the oracle when `None`.
    pub m0: Option<f64>,
    pub m_floor: f64,
    pub tau: f64,
    pub seed: u64,
    /// Starting point; `∇f(0)` when `None`.
    pub x0: Option<Vector>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rule: UpdateRule::ForwardEstimate,
            n: 25,
            h: 1e-9,
            kappa_max: 1e9,
            grad_tol: 1e-8,
            max_outer: 1000,
            max_oracle_calls: 100_000,
            m0: None,
            m_floor: 1e-12,
            tau: 10.0,
            seed: 0,
            x0: None,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n == 0 || self.n > dim {
            return bad(format!("memory size must be in 1..={dim}, got {}", self.n));
        }
        for (name, v) in [
            ("h", self.h),
            ("kappa_max", self.kappa_max),
            ("grad_tol", self.grad_tol),
            ("m_floor", self.m_floor),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.kappa_max < 1.0 {
            return bad(format!("kappa_max must be at least 1, got {}", self.kappa_max));
        }
        if !(self.tau > 1.0) {
            return bad(format!("tau must exceed 1, got {}", self.tau));
        }
        if let Some(m0) = self.m0 {
            if !(m0 > 0.0) || !m0.is_finite() {
                return bad(format!("m0 must be positive, got {m0}"));
            }
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: x0.len() });
            }
        }
        Ok(())
    }
}

/// One row of a run trace, describing the iterate `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub t: usize,
    /// Gradient calls so far, including `∇f(x_t)`.
    pub oracle_calls: usize,
    pub f: f64,
    pub grad_norm: f64,
    /// Regularization (or step-size estimate) that produced `x_t`.
    pub m: f64,
    /// `‖x_t − x_{t−1}‖`.
    pub step_norm: f64,
    /// Doublings of `M` in the step that produced `x_t`.
    pub backtracks: usize,
    pub wall_ms: f64,
    /// Function-value calls so far.
    pub value_calls: usize,
    /// Memory size and conditioning at the solve that produced `x_t`.
    pub memory_size: usize,
    pub kappa_d: f64,
    pub diagnostics: StepDiagnostics,
}

/// Certificates gathered over the subproblem solves of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDiagnostics {
    /// `f(x₊) ≤ f(x) − (M/12)‖x₊ − x‖³` up to tolerance (Type-I only).
    pub decrease_ok: bool,
    /// Largest first-order residual relative to `max(‖Dᵀ∇f‖, 1)`.
    pub first_order: f64,
    /// Smallest eigenvalue of `H + (M r/2)DᵀD`.
    pub second_order: f64,
    pub solves: usize,
}

impl Default for StepDiagnostics {
    fn default() -> Self {
        Self { decrease_ok: true, first_order: 0.0, second_order: f64::INFINITY, solves: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxOuter,
    OracleBudget,
    /// No measurable decrease was possible (line-search baselines only).
    Stalled,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Converged => "converged",
            StopReason::MaxOuter => "max-outer",
            StopReason::OracleBudget => "oracle-budget",
            StopReason::Stalled => "stalled",
        })
    }
}

pub const CSV_HEADER: &str = "t,oracle_calls,f,grad_norm,M,step_norm,backtracks,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    /// `M₀` used by the run (the initial step-size estimate for baselines).
    pub m0: f64,
}

impl IterationTrace {
    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// Gradient calls at the first row with `‖∇f‖ ≤ tol`.
    pub fn oracle_calls_to(&self, tol: f64) -> Option<usize> {
        self.records.iter().find(|r| r.grad_norm <= tol).map(|r| r.oracle_calls)
    }

    pub fn write_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{:e},{:e},{:e},{:e},{},{:.3}",
                r.t, r.oracle_calls, r.f, r.grad_norm, r.m, r.step_norm, r.backtracks, r.wall_ms
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub x: Vector,
    pub trace: IterationTrace,
}

/// Starting point and initial regularization for a run.
///
/// Calls made here are not charged to the trace.
pub fn prepare_start(oracle: &Oracle, config: &SolverConfig) -> Result<(Vector, f64)> {
    config.validate(oracle.dim())?;
    let x0 = match &config.x0 {
        Some(x) => x.clone(),
        None => oracle.gradient(&Vector::zeros(oracle.dim())),
    };
    let m0 = match config.m0 {
        Some(m) => m,
        None => match estimate_initial_smoothness(oracle, &x0, config.h, config.tau) {
            Ok(m) => m,
            Err(Error::ZeroGradient) => 1.0,
            Err(e) => return Err(e),
        },
    };
    Ok((x0, m0.max(config.m_floor)))
}

/// Result of one backtracking subroutine call.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub x_plus: Vector,
    pub f_plus: f64,
    /// Gradient at `x_plus`, when the acceptance test needed it.
    pub g_plus: Option<Vector>,
    pub m: f64,
    pub alpha: Vector,
    pub step_norm: f64,
    pub backtracks: usize,
    pub diagnostics: StepDiagnostics,
}

const M_OVERFLOW: f64 = 1e30;
const ACCEPT_SLACK: f64 = 1e-12;
const DECREASE_TOL: f64 = 1e-10;

/// Snapshot adjusted for the subproblem: orthonormal memories use `DᵀD = I`
/// exactly so the whitening and the model agree.
fn model_for(snap: &MemorySnapshot, g: &Vector, m: f64) -> Result<CubicModel> {
    let mut model = cubic::build_h(snap, g, m)?;
    if snap.orthonormal {
        let k = snap.k();
        model.gram = Matrix::identity(k, k);
    }
    Ok(model)
}

fn record_certificates(diag: &mut StepDiagnostics, model: &CubicModel, sol: &cubic::SubproblemSolution) {
    let scale = model.g_proj.norm().max(1.0);
    diag.first_order = diag.first_order.max(model.first_order_residual(&sol.alpha) / scale);
    if let Ok(margin) = model.second_order_margin(sol.r) {
        diag.second_order = diag.second_order.min(margin);
    }
    diag.solves += 1;
}

/// Type-I backtracking: doubles `M` from `m_init` until
/// `f(x + Dα) ≤ f(x) + ∇f(x)ᵀDα + ½αᵀHα + (M/6)‖Dα‖³`.
pub fn type1_backtrack_step(
    oracle: &Oracle,
    snap: &MemorySnapshot,
    x: &Vector,
    fx: f64,
    g: &Vector,
    m_init: f64,
) -> Result<StepResult> {
    let k = snap.k();
    if g.norm() == 0.0 || k == 0 {
        return Ok(StepResult {
            x_plus: x.clone(),
            f_plus: fx,
            g_plus: None,
            m: m_init,
            alpha: Vector::zeros(k),
            step_norm: 0.0,
            backtracks: 0,
            diagnostics: StepDiagnostics::default(),
        });
    }
    let mut m = m_init;
    let mut backtracks = 0;
    let mut diag = StepDiagnostics::default();
    loop {
        if !(m <= M_OVERFLOW) {
            return Err(Error::BacktrackOverflow(m));
        }
        let model = model_for(snap, g, m)?;
        let sol = match cubic::solve_cubic_subproblem(&model) {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => {
                m *= 2.0;
                backtracks += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        record_certificates(&mut diag, &model, &sol);
        let step = &snap.d * &sol.alpha;
        let x_plus = x + &step;
        let f_plus = oracle.value(&x_plus);
        let bound = fx + sol.model_value;
        if f_plus.is_finite() && f_plus <= bound + ACCEPT_SLACK * fx.abs().max(1.0) {
            let step_norm = step.norm();
            diag.decrease_ok =
                f_plus <= fx - m / 12.0 * step_norm.powi(3) + DECREASE_TOL * fx.abs().max(1.0);
            return Ok(StepResult {
                x_plus,
                f_plus,
                g_plus: None,
                m,
                alpha: sol.alpha,
                step_norm,
                backtracks,
                diagnostics: diag,
            });
        }
        m *= 2.0;
        backtracks += 1;
    }
}

/// Type-II backtracking: doubles `M` until
/// `‖∇f(x₊)‖ ≤ ‖∇f(x) + Gα‖ + (M/2)(|α|ᵀε + ‖Dα‖²)`.
///
/// Each trial costs one gradient call; the accepted gradient is returned.
pub fn type2_backtrack_step(
    oracle: &Oracle,
    snap: &MemorySnapshot,
    x: &Vector,
    fx: f64,
    g: &Vector,
    m_init: f64,
) -> Result<StepResult> {
    let k = snap.k();
    let gnorm = g.norm();
    if gnorm == 0.0 || k == 0 {
        return Ok(StepResult {
            x_plus: x.clone(),
            f_plus: fx,
            g_plus: Some(g.clone()),
            m: m_init,
            alpha: Vector::zeros(k),
            step_norm: 0.0,
            backtracks: 0,
            diagnostics: StepDiagnostics::default(),
        });
    }
    let mut m = m_init;
    let mut backtracks = 0;
    let mut diag = StepDiagnostics::default();
    loop {
        if !(m <= M_OVERFLOW) {
            return Err(Error::BacktrackOverflow(m));
        }
        let problem = Type2Problem::from_snapshot(snap, g, m)?;
        let alpha = match type2::solve_type2_small(&problem) {
            Ok(a) => a,
            Err(Error::NoConvergence) => {
                m *= 2.0;
                backtracks += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        diag.solves += 1;
        let bound = type2::type2_objective(&problem, &alpha);
        let step = &snap.d * &alpha;
        let x_plus = x + &step;
        let g_plus = oracle.gradient(&x_plus);
        let gp = g_plus.norm();
        if gp.is_finite() && gp <= bound + ACCEPT_SLACK * gnorm.max(1.0) {
            let f_plus = oracle.value(&x_plus);
            return Ok(StepResult {
                x_plus,
                f_plus,
                g_plus: Some(g_plus),
                m,
                alpha,
                step_norm: step.norm(),
                backtracks,
                diagnostics: diag,
            });
        }
        m *= 2.0;
        backtracks += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ModelKind {
    Type1,
    Type2,
}

/// Generic iterative Type-I method.
pub fn type1_iterate(oracle: &Oracle, config: &SolverConfig) -> Result<RunOutput> {
    iterate(oracle, config, ModelKind::Type1)
}

/// Generic iterative Type-II method.
pub fn type2_iterate(oracle: &Oracle, config: &SolverConfig) -> Result<RunOutput> {
    iterate(oracle, config, ModelKind::Type2)
}

/// Updates the memory at `x`, falling back to a forward estimate if the rule
/// left it empty, and prunes when the rule calls for it.
pub(crate) fn refresh_memory(
    mem: &mut DirectionMemory,
    oracle: &Oracle,
    x: &Vector,
    g: &Vector,
    kappa_max: f64,
) -> Result<()> {
    mem.update(oracle, x, g)?;
    if mem.is_empty() {
        mem.update_forward_estimate(oracle, x, g)?;
    }
    if mem.rule().needs_pruning() {
        mem.prune(kappa_max);
    }
    Ok(())
}

fn iterate(oracle: &Oracle, config: &SolverConfig, kind: ModelKind) -> Result<RunOutput> {
    let (x0, m0) = prepare_start(oracle, config)?;
    if config.max_outer == 0 {
        return Ok(RunOutput {
            x: x0,
            trace: IterationTrace { records: Vec::new(), stop: StopReason::MaxOuter, m0 },
        });
    }
    let start = Instant::now();
    let grad_base = oracle.grad_calls();
    let value_base = oracle.value_calls();
    let mut mem = DirectionMemory::new(config.rule, config.n, oracle.dim(), config.h, config.seed)?;
    let mut records = Vec::new();
    let mut x = x0;
    let mut fx = oracle.value(&x);
    let mut m = m0;
    let mut carried: Option<Vector> = None;
    let mut last = (0.0, 0, 0, 1.0, StepDiagnostics::default());
    let mut t = 0;
    let stop = loop {
        let g = match carried.take() {
            Some(g) => g,
            None => oracle.gradient(&x),
        };
        let gnorm = g.norm();
        let calls = oracle.grad_calls() - grad_base;
        let (step_norm, backtracks, k, kappa, diagnostics) = last;
        records.push(IterationRecord {
            t,
            oracle_calls: calls,
            f: fx,
            grad_norm: gnorm,
            m,
            step_norm,
            backtracks,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            value_calls: oracle.value_calls() - value_base,
            memory_size: k,
            kappa_d: kappa,
            diagnostics,
        });
        if !gnorm.is_finite() || !fx.is_finite() {
            return Err(Error::NonFinite("iterate"));
        }
        if gnorm <= config.grad_tol {
            break StopReason::Converged;
        }
        if t >= config.max_outer {
            break StopReason::MaxOuter;
        }
        if calls >= config.max_oracle_calls {
            break StopReason::OracleBudget;
        }
        refresh_memory(&mut mem, oracle, &x, &g, config.kappa_max)?;
        let snap = mem.snapshot(&x);
        let m_init = (m / 2.0).max(config.m_floor);
        let step = match kind {
            ModelKind::Type1 => type1_backtrack_step(oracle, &snap, &x, fx, &g, m_init)?,
            ModelKind::Type2 => type2_backtrack_step(oracle, &snap, &x, fx, &g, m_init)?,
        };
        last = (step.step_norm, step.backtracks, snap.k(), snap.kappa_d, step.diagnostics);
        x = step.x_plus;
        fx = step.f_plus;
        m = step.m;
        carried = step.g_plus;
        t += 1;
    };
    Ok(RunOutput { x, trace: IterationTrace { records, stop, m0 } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{make_cubic_regularized_ls, make_quadratic, make_rosenbrock, Dataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    fn quadratic(d: usize, seed: u64) -> Oracle {
        let a = gaussian(d + 5, d, seed);
        let b = gaussian(d + 5, 1, seed + 1).column(0).into_owned();
        make_quadratic(a, b).unwrap()
    }

    #[test]
    fn config_validation() {
        let c = SolverConfig { n: 30, ..Default::default() };
        assert!(c.validate(10).is_err());
        let c = SolverConfig { n: 5, h: 0.0, ..Default::default() };
        assert!(c.validate(10).is_err());
        let c = SolverConfig { n: 5, kappa_max: 0.5, ..Default::default() };
        assert!(c.validate(10).is_err());
        let c = SolverConfig { n: 5, tau: 1.0, ..Default::default() };
        assert!(c.validate(10).is_err());
        assert!(SolverConfig { n: 5, ..Default::default() }.validate(10).is_ok());
    }

    #[test]
    fn full_memory_quadratic_step_is_newton() {
        let d = 6;
        let o = quadratic(d, 3);
        let x = Vector::from_element(d, 0.3);
        let g = o.gradient(&x);
        // Finite differences are exact on quadratics for any h; a large h
        // keeps rounding in G below the acceptance slack.
        let mut mem = DirectionMemory::new(UpdateRule::OrthoBatch, d, d, 1e-2, 0).unwrap();
        mem.update(&o, &x, &g).unwrap();
        let snap = mem.snapshot(&x);
        let fx = o.value(&x);
        let step = type1_backtrack_step(&o, &snap, &x, fx, &g, 1e-9).unwrap();
        assert_eq!(step.backtracks, 0);
        let hess = o.hessian(&x).unwrap();
        let newton = &x - hess.lu().solve(&g).unwrap();
        assert!((step.x_plus - newton).norm() < 1e-6);
    }

    #[test]
    fn stationary_point_returns_zero_step() {
        let o = make_rosenbrock(3).unwrap();
        let x = Vector::from_element(3, 1.0);
        let g = o.gradient(&x);
        let mem = DirectionMemory::new(UpdateRule::ForwardEstimate, 2, 3, 1e-9, 0).unwrap();
        let step = type1_backtrack_step(&o, &mem.snapshot(&x), &x, 0.0, &g, 1.0).unwrap();
        assert_eq!(step.x_plus, x);
        assert_eq!(step.alpha.len(), 0);
    }

    #[test]
    fn terminal_m_respects_lipschitz_bound() {
        let d = 8;
        let a = gaussian(12, d, 4);
        let b = gaussian(12, 1, 5).column(0).into_owned();
        let c = 1.0;
        let o = make_cubic_regularized_ls(a, b, c).unwrap();
        let m_init = 1e-3;
        let cfg = SolverConfig { n: 4, m0: Some(m_init), max_outer: 30, ..Default::default() };
        let out = type1_iterate(&o, &cfg).unwrap();
        let l = 2.0 * c;
        for r in &out.trace.records {
            assert!(r.m <= (2.0 * l).max(m_init) * 2.0, "M = {}", r.m);
        }
    }

    #[test]
    fn max_outer_zero_is_a_no_op() {
        let o = quadratic(4, 1);
        let x0 = Vector::from_element(4, 2.0);
        let cfg = SolverConfig { n: 2, max_outer: 0, x0: Some(x0.clone()), m0: Some(1.0), ..Default::default() };
        let out = type1_iterate(&o, &cfg).unwrap();
        assert_eq!(out.x, x0);
        assert!(out.trace.records.is_empty());
        assert_eq!(o.grad_calls(), 0);
    }

    #[test]
    fn ortho_batch_full_memory_converges_fast() {
        let d = 10;
        let o = quadratic(d, 7);
        let cfg = SolverConfig { rule: UpdateRule::OrthoBatch, n: d, ..Default::default() };
        let out = type1_iterate(&o, &cfg).unwrap();
        assert_eq!(out.trace.stop, StopReason::Converged);
        assert!(out.trace.records.len() - 1 <= 3);
    }

    #[test]
    fn type1_f_is_nonincreasing_for_every_rule() {
        let d = 10;
        let o_builders: Vec<Box<dyn Fn() -> Oracle>> = vec![
            Box::new(move || quadratic(d, 11)),
            Box::new(move || make_rosenbrock(d).unwrap()),
        ];
        for build in &o_builders {
            for rule in UpdateRule::ALL {
                let o = build();
                let cfg = SolverConfig { rule, n: 5, max_outer: 40, ..Default::default() };
                let out = type1_iterate(&o, &cfg).unwrap();
                for w in out.trace.records.windows(2) {
                    assert!(w[1].f <= w[0].f + 1e-12 * w[0].f.abs().max(1.0), "{rule}");
                    assert!(w[1].diagnostics.decrease_ok, "{rule}");
                }
            }
        }
    }

    #[test]
    fn forward_rule_uses_two_gradients_per_iteration() {
        let d = 8;
        let o = quadratic(d, 2);
        let cfg = SolverConfig { n: 4, max_outer: 10, grad_tol: 1e-30, ..Default::default() };
        let out = type1_iterate(&o, &cfg).unwrap();
        for r in &out.trace.records {
            assert_eq!(r.oracle_calls, 2 * r.t + 1);
        }
    }

    #[test]
    fn type2_gradient_norm_is_nonincreasing() {
        let mut data = Dataset::synthetic(60, 7, 3);
        data.preprocess();
        let o = crate::oracle::make_logistic(&data, 1e-3).unwrap();
        let cfg = SolverConfig { n: 4, max_outer: 30, ..Default::default() };
        let out = type2_iterate(&o, &cfg).unwrap();
        for w in out.trace.records.windows(2) {
            assert!(w[1].grad_norm <= w[0].grad_norm * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn type2_stationary_start_stops_immediately() {
        let o = make_rosenbrock(4).unwrap();
        let cfg = SolverConfig { n: 2, x0: Some(Vector::from_element(4, 1.0)), m0: Some(1.0), ..Default::default() };
        let out = type2_iterate(&o, &cfg).unwrap();
        assert_eq!(out.trace.stop, StopReason::Converged);
        assert_eq!(out.trace.records.len(), 1);
    }

    #[test]
    fn csv_schema() {
        let o = quadratic(4, 9);
        let cfg = SolverConfig { n: 2, max_outer: 3, ..Default::default() };
        let csv = type1_iterate(&o, &cfg).unwrap().trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        for line in lines {
            assert_eq!(line.split(',').count(), 8);
        }
    }
}
