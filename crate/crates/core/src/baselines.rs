//! First-order and limited-memory baselines sharing the trace format of the
//! secant methods. The `M` column holds the Lipschitz estimate `L` for
//! gradient descent and Nesterov, and `NaN` for L-BFGS.

use std::collections::VecDeque;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::linalg::Vector;
use crate::oracle::Oracle;
use crate::solver::{IterationRecord, IterationTrace, RunOutput, StepDiagnostics, StopReason};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub grad_tol: f64,
    pub max_outer: usize,
    pub max_oracle_calls: usize,
    /// Initial Lipschitz estimate for GD and Nesterov.
    pub l0: f64,
    /// Pairs kept by L-BFGS.
    pub lbfgs_memory: usize,
    /// Defaults to `∇f(0)`.
    pub x0: Option<Vector>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_outer: 1000,
            max_oracle_calls: 100_000,
            l0: 1.0,
            lbfgs_memory: 25,
            x0: None,
        }
    }
}

const L_OVERFLOW: f64 = 1e30;

impl BaselineConfig {
    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.l0 > 0.0 && self.l0.is_finite()) {
            return Err(Error::InvalidConfig(format!("l0 must be positive, got {}", self.l0)));
        }
        if self.lbfgs_memory == 0 {
            return Err(Error::InvalidConfig("lbfgs_memory must be positive".into()));
        }
        if let Some(x0) = &self.x0 {
            if x0.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: x0.len() });
            }
        }
        Ok(())
    }
}

struct Recorder<'a> {
    oracle: &'a Oracle,
    cfg: &'a BaselineConfig,
    start: Instant,
    grad_base: usize,
    value_base: usize,
    records: Vec<IterationRecord>,
}

impl<'a> Recorder<'a> {
    fn new(oracle: &'a Oracle, cfg: &'a BaselineConfig) -> Self {
        Self {
            oracle,
            cfg,
            start: Instant::now(),
            grad_base: oracle.grad_calls(),
            value_base: oracle.value_calls(),
            records: Vec::new(),
        }
    }

    fn calls(&self) -> usize {
        self.oracle.grad_calls() - self.grad_base
    }

    fn push(&mut self, f: f64, g: &Vector, m: f64, step_norm: f64, backtracks: usize) {
        self.records.push(IterationRecord {
            t: self.records.len(),
            oracle_calls: self.calls(),
            f,
            grad_norm: g.norm(),
            m,
            step_norm,
            backtracks,
            wall_ms: self.start.elapsed().as_secs_f64() * 1e3,
            value_calls: self.oracle.value_calls() - self.value_base,
            memory_size: 0,
            kappa_d: 1.0,
            diagnostics: StepDiagnostics::default(),
        });
    }

    /// Stop test for the iterate just recorded.
    fn stop(&self, g: &Vector) -> Option<StopReason> {
        let t = self.records.len() - 1;
        if g.norm() <= self.cfg.grad_tol {
            Some(StopReason::Converged)
        } else if t >= self.cfg.max_outer {
            Some(StopReason::MaxOuter)
        } else if self.calls() >= self.cfg.max_oracle_calls {
            Some(StopReason::OracleBudget)
        } else {
            None
        }
    }

    fn finish(self, x: Vector, stop: StopReason) -> RunOutput {
        RunOutput { x, trace: IterationTrace { records: self.records, stop, m0: self.cfg.l0 } }
    }
}

fn start_point(oracle: &Oracle, cfg: &BaselineConfig) -> Result<Vector> {
    cfg.validate(oracle.dim())?;
    Ok(match &cfg.x0 {
        Some(x0) => x0.clone(),
        None => oracle.gradient(&Vector::zeros(oracle.dim())),
    })
}

fn empty(x: Vector, cfg: &BaselineConfig) -> RunOutput {
    RunOutput { x, trace: IterationTrace { records: Vec::new(), stop: StopReason::MaxOuter, m0: cfg.l0 } }
}

/// Gradient step `x − ∇f(y)/L` from `y` with `L` doubled until the
/// sufficient-decrease test `f(x₊) ≤ f(y) − ‖∇f(y)‖²/(2L)` passes.
fn gradient_step(oracle: &Oracle, y: &Vector, fy: f64, gy: &Vector, mut l: f64) -> Result<(Vector, f64, f64, usize)> {
    let gn2 = gy.norm_squared();
    let mut backtracks = 0;
    loop {
        if !(l <= L_OVERFLOW) {
            return Err(Error::BacktrackOverflow(l));
        }
        let x = y - gy / l;
        let fx = oracle.value(&x);
        if fx.is_finite() && fx <= fy - gn2 / (2.0 * l) + 1e-12 * fy.abs().max(1.0) {
            return Ok((x, fx, l, backtracks));
        }
        l *= 2.0;
        backtracks += 1;
    }
}

/// Gradient descent with an adaptive Lipschitz estimate: halved after each
/// accepted step, doubled on failed sufficient decrease.
pub fn run_gd(oracle: &Oracle, cfg: &BaselineConfig) -> Result<RunOutput> {
    let mut x = start_point(oracle, cfg)?;
    if cfg.max_outer == 0 {
        return Ok(empty(x, cfg));
    }
    let mut rec = Recorder::new(oracle, cfg);
    let mut fx = oracle.value(&x);
    let mut g = oracle.gradient(&x);
    let mut l = cfg.l0;
    rec.push(fx, &g, l, 0.0, 0);
    loop {
        if let Some(stop) = rec.stop(&g) {
            return Ok(rec.finish(x, stop));
        }
        let (x_new, f_new, l_used, backtracks) = gradient_step(oracle, &x, fx, &g, l)?;
        let step = (&x_new - &x).norm();
        x = x_new;
        fx = f_new;
        g = oracle.gradient(&x);
        rec.push(fx, &g, l_used, step, backtracks);
        l = l_used / 2.0;
    }
}

/// Nesterov's accelerated gradient (FISTA momentum) with backtracking on `L`
/// and a function-value restart.
pub fn run_nesterov(oracle: &Oracle, cfg: &BaselineConfig) -> Result<RunOutput> {
    let mut x = start_point(oracle, cfg)?;
    if cfg.max_outer == 0 {
        return Ok(empty(x, cfg));
    }
    let mut rec = Recorder::new(oracle, cfg);
    let mut fx = oracle.value(&x);
    let mut gx = oracle.gradient(&x);
    let mut l = cfg.l0;
    rec.push(fx, &gx, l, 0.0, 0);
    let mut y = x.clone();
    let mut fy = fx;
    let mut gy = gx.clone();
    let mut theta = 1.0f64;
    loop {
        if let Some(stop) = rec.stop(&gx) {
            return Ok(rec.finish(x, stop));
        }
        let (x_new, f_new, l_used, backtracks) = gradient_step(oracle, &y, fy, &gy, l)?;
        l = l_used;
        let step = (&x_new - &x).norm();
        if f_new > fx {
            // Restart from the current iterate without momentum.
            theta = 1.0;
            y = x.clone();
            fy = fx;
            gy = gx.clone();
            continue;
        }
        let theta_new = (1.0 + (1.0 + 4.0 * theta * theta).sqrt()) / 2.0;
        let momentum = (theta - 1.0) / theta_new;
        y = &x_new + (&x_new - &x) * momentum;
        theta = theta_new;
        x = x_new;
        fx = f_new;
        gx = oracle.gradient(&x);
        if momentum == 0.0 {
            fy = fx;
            gy = gx.clone();
        } else {
            fy = oracle.value(&y);
            gy = oracle.gradient(&y);
        }
        rec.push(fx, &gx, l, step, backtracks);
    }
}

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const LINE_SEARCH_MAX: usize = 60;
const CURVATURE_MIN: f64 = 1e-12;

/// Weak-Wolfe line search by bisection and expansion. Returns
/// `(step, x, f, g, trials)` or `None` when no acceptable step was found.
fn wolfe_search(
    oracle: &Oracle,
    x: &Vector,
    fx: f64,
    g: &Vector,
    p: &Vector,
) -> Option<(f64, Vector, f64, Vector, usize)> {
    let slope = g.dot(p);
    let (mut lo, mut hi, mut a) = (0.0f64, f64::INFINITY, 1.0f64);
    // Last point with sufficient decrease, used if curvature never holds.
    let mut fallback = None;
    for trial in 1..=LINE_SEARCH_MAX {
        let xn = x + p * a;
        let fn_ = oracle.value(&xn);
        if !fn_.is_finite() || fn_ > fx + WOLFE_C1 * a * slope {
            hi = a;
        } else {
            let gn = oracle.gradient(&xn);
            if gn.dot(p) < WOLFE_C2 * slope {
                lo = a;
                fallback = Some((a, xn, fn_, gn));
            } else {
                return Some((a, xn, fn_, gn, trial));
            }
        }
        a = if hi.is_finite() { (lo + hi) / 2.0 } else { 2.0 * lo };
    }
    fallback.map(|(a, xn, f, g)| (a, xn, f, g, LINE_SEARCH_MAX))
}

/// L-BFGS with the two-loop recursion and a weak-Wolfe line search. Pairs
/// with `sᵀy ≤ 1e-12` are skipped; a failed search along the quasi-Newton
/// direction falls back to steepest descent with the memory cleared, and a
/// failure there stops the run as stalled.
pub fn run_lbfgs(oracle: &Oracle, cfg: &BaselineConfig) -> Result<RunOutput> {
    let mut x = start_point(oracle, cfg)?;
    if cfg.max_outer == 0 {
        return Ok(empty(x, cfg));
    }
    let mut rec = Recorder::new(oracle, cfg);
    let mut fx = oracle.value(&x);
    let mut g = oracle.gradient(&x);
    rec.push(fx, &g, f64::NAN, 0.0, 0);
    let mut pairs: VecDeque<(Vector, Vector, f64)> = VecDeque::new();
    loop {
        if let Some(stop) = rec.stop(&g) {
            return Ok(rec.finish(x, stop));
        }
        let mut p = -two_loop(&pairs, &g);
        if !(g.dot(&p) < 0.0) {
            pairs.clear();
            p = -g.clone();
        }
        let found = match wolfe_search(oracle, &x, fx, &g, &p) {
            Some(r) => Some(r),
            None if !pairs.is_empty() => {
                pairs.clear();
                p = -g.clone();
                wolfe_search(oracle, &x, fx, &g, &p)
            }
            None => None,
        };
        let Some((a, xn, fnew, gn, trials)) = found else {
            // No decrease is measurable along steepest descent.
            return Ok(rec.finish(x, StopReason::Stalled));
        };
        let s = &p * a;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > CURVATURE_MIN {
            if pairs.len() == cfg.lbfgs_memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), yv, 1.0 / sy));
        }
        x = xn;
        fx = fnew;
        g = gn;
        rec.push(fx, &g, f64::NAN, s.norm(), trials - 1);
    }
}

fn two_loop(pairs: &VecDeque<(Vector, Vector, f64)>, g: &Vector) -> Vector {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = pairs.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::oracle::{make_quadratic, make_rosenbrock};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn quadratic(d: usize, seed: u64) -> Oracle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_fn(d + 3, d, |_, _| StandardNormal.sample(&mut rng));
        let b = Vector::from_fn(d + 3, |_, _| StandardNormal.sample(&mut rng));
        make_quadratic(a, b).unwrap()
    }

    #[test]
    fn lbfgs_solves_small_quadratic() {
        let o = quadratic(5, 1);
        let cfg = BaselineConfig { lbfgs_memory: 5, max_outer: 30, ..Default::default() };
        let out = run_lbfgs(&o, &cfg).unwrap();
        assert_eq!(out.trace.stop, StopReason::Converged);
        assert!(out.trace.last().unwrap().grad_norm <= 1e-8);
        assert!(out.trace.records.iter().all(|r| r.m.is_nan()));
    }

    #[test]
    fn gd_is_monotone() {
        let o = quadratic(6, 2);
        let out = run_gd(&o, &BaselineConfig { max_outer: 200, ..Default::default() }).unwrap();
        for w in out.trace.records.windows(2) {
            assert!(w[1].f <= w[0].f + 1e-12 * w[0].f.abs().max(1.0));
        }
        assert!(out.trace.last().unwrap().grad_norm < out.trace.records[0].grad_norm);
    }

    #[test]
    fn lbfgs_is_monotone_on_rosenbrock() {
        let o = make_rosenbrock(6).unwrap();
        let cfg = BaselineConfig { x0: Some(Vector::zeros(6)), max_outer: 500, ..Default::default() };
        let out = run_lbfgs(&o, &cfg).unwrap();
        for w in out.trace.records.windows(2) {
            assert!(w[1].f <= w[0].f + 1e-12 * w[0].f.abs().max(1.0));
        }
        assert_eq!(out.trace.stop, StopReason::Converged);
    }

    #[test]
    fn nesterov_beats_gd_on_ill_conditioned_quadratic() {
        let d = 30;
        let diag = Vector::from_fn(d, |i, _| 10f64.powf(-3.0 * i as f64 / (d - 1) as f64));
        let a = Matrix::from_diagonal(&diag.map(f64::sqrt));
        let o = make_quadratic(a, Vector::from_element(d, 1.0)).unwrap();
        let cfg = BaselineConfig { max_outer: 400, ..Default::default() };
        let gd = run_gd(&o, &cfg).unwrap();
        let nes = run_nesterov(&o, &cfg).unwrap();
        assert!(nes.trace.last().unwrap().f <= gd.trace.last().unwrap().f);
        for w in nes.trace.records.windows(2) {
            assert!(w[1].f <= w[0].f + 1e-12 * w[0].f.abs().max(1.0));
        }
    }

    #[test]
    fn zero_outer_is_empty() {
        let o = quadratic(3, 3);
        let cfg = BaselineConfig { max_outer: 0, ..Default::default() };
        for run in [run_gd, run_nesterov, run_lbfgs] {
            assert!(run(&o, &cfg).unwrap().trace.records.is_empty());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let o = quadratic(3, 4);
        let cfg = BaselineConfig { l0: 0.0, ..Default::default() };
        assert!(matches!(run_gd(&o, &cfg), Err(Error::InvalidConfig(_))));
    }
}
