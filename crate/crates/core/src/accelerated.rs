//! Accelerated Type-I method built on an estimate sequence
//! `φ_t(v) = ℓ⁽⁰⁾ + ℓ⁽¹⁾ᵀv + (λ⁽¹⁾/2)‖v − x₀‖² + (λ⁽²⁾/6)‖v − x₀‖³`.

use std::time::Instant;

use crate::cubic::{self, CubicModel};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::memory::{DirectionMemory, MemorySnapshot};
use crate::oracle::Oracle;
use crate::solver::{
    prepare_start, refresh_memory, type1_backtrack_step, IterationRecord, IterationTrace,
    SolverConfig, StepDiagnostics, StopReason,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitFlag {
    LargeStep,
    SmallStep,
}

#[derive(Debug, Clone)]
pub struct AccelStepResult {
    pub x_plus: Vector,
    pub g_plus: Vector,
    pub alpha: Vector,
    pub m: f64,
    /// `γ_M` at the accepted `M`.
    pub gamma: f64,
    pub step_norm: f64,
    pub exit_flag: ExitFlag,
    pub backtracks: usize,
}

/// `b_t = (t+1)(t+2)/2`.
pub fn schedule_b(t: u64) -> u128 {
    let t = t as u128;
    (t + 1) * (t + 2) / 2
}

/// `B_t = t(t+1)(t+2)/6`.
pub fn schedule_big_b(t: u64) -> u128 {
    let t = t as u128;
    t * (t + 1) * (t + 2) / 6
}

/// `β_t = 3/(t+3)`.
pub fn schedule_beta(t: u64) -> f64 {
    3.0 / (t as f64 + 3.0)
}

const M_OVERFLOW: f64 = 1e30;
const LAMBDA_OVERFLOW: f64 = 1e30;
const MAX_ATTEMPTS: usize = 2000;
const LOWER_BOUND_TOL: f64 = 1e-8;

/// `‖(I − P)G‖` with `P` the projector onto the span of `D`.
fn out_of_span_norm(snap: &MemorySnapshot) -> Result<f64> {
    let q = if snap.orthonormal {
        snap.d.clone()
    } else {
        linalg::qr_orthonormalize(&snap.d)?
    };
    let resid = &snap.g - &q * q.tr_mul(&snap.g);
    Ok(linalg::spectral_norm(&resid))
}

/// `γ_M = (κ_D/‖D‖)(3/2‖ε‖ + 2‖(I−P)G‖/M)`.
pub fn gamma_m(snap: &MemorySnapshot, out_of_span: f64, m: f64) -> f64 {
    snap.kappa_d / snap.norm_d * (1.5 * snap.eps.norm() + 2.0 * out_of_span / m)
}

fn exit_flag(g_plus: &Vector, step: &Vector, m: f64, gamma: f64) -> Option<ExitFlag> {
    let gn = g_plus.norm();
    let descent = -g_plus.dot(step);
    let r = step.norm();
    let large = 2.0 / 3f64.powf(0.75) * gn.powf(1.5) / m.sqrt();
    if large <= descent {
        return Some(ExitFlag::LargeStep);
    }
    let denom = m * (gamma + r);
    let small = if gn == 0.0 { 0.0 } else { gn * gn / denom };
    if small <= descent && r <= (3f64.sqrt() - 1.0) * gamma {
        return Some(ExitFlag::SmallStep);
    }
    None
}

/// Accelerated subroutine at `y`: doubles `M` from `m_init` until the step
/// earns a `LargeStep` or `SmallStep` certificate. `snap` must have its error
/// vector centered at `y`.
pub fn accel_subroutine(
    oracle: &Oracle,
    snap: &MemorySnapshot,
    y: &Vector,
    g_y: &Vector,
    m_init: f64,
) -> Result<AccelStepResult> {
    let k = snap.k();
    let sym = cubic::symmetric_part(&snap.d, &snap.g);
    let gram = if snap.orthonormal { Matrix::identity(k, k) } else { snap.d.tr_mul(&snap.d) };
    let base = cubic::build_h(snap, g_y, 1.0)?;
    let out_of_span = out_of_span_norm(snap)?;
    let mut m = m_init;
    let mut backtracks = 0;
    loop {
        if !(m <= M_OVERFLOW) {
            return Err(Error::BacktrackOverflow(m));
        }
        let gamma = gamma_m(snap, out_of_span, m);
        let h = &sym + &gram * (m * gamma / 2.0);
        let model = CubicModel { gram: gram.clone(), ..base.with_h(h, m) };
        let sol = match cubic::solve_cubic_subproblem(&model) {
            Ok(s) => s,
            Err(Error::NonFinite(_)) => {
                m *= 2.0;
                backtracks += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let step = &snap.d * &sol.alpha;
        let x_plus = y + &step;
        let g_plus = oracle.gradient(&x_plus);
        if let Some(flag) = exit_flag(&g_plus, &step, m, gamma) {
            return Ok(AccelStepResult {
                step_norm: step.norm(),
                x_plus,
                g_plus,
                alpha: sol.alpha,
                m,
                gamma,
                exit_flag: flag,
                backtracks,
            });
        }
        m *= 2.0;
        backtracks += 1;
    }
}

/// Accumulators of the estimate sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSequenceState {
    pub l0: f64,
    pub l1: Vector,
    pub lambda1: f64,
    pub lambda2: f64,
    pub t: u64,
    pub x0: Vector,
}

impl EstimateSequenceState {
    /// `(v, φ(v))` at the minimizer.
    pub fn minimize(&self) -> (Vector, f64) {
        let (v, _, phi) = cubic::minimize_estimate_phi(self.l0, &self.l1, self.lambda1, self.lambda2, &self.x0);
        (v, phi)
    }

    /// Adds `weight·[f(x) + ∇f(x)ᵀ(v − x)]`.
    pub fn add_linearization(&mut self, weight: f64, fx: f64, x: &Vector, g: &Vector) {
        self.l0 += weight * (fx - g.dot(x));
        self.l1 += g * weight;
    }
}

/// Per committed iteration bookkeeping of the accelerated method.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelRecord {
    pub t: u64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// `min φ_t`.
    pub phi_min: f64,
    /// `B_t f(x_t)`.
    pub weighted_f: f64,
    pub exit_flag: Option<ExitFlag>,
    pub attempts: usize,
    /// Largest `λ⁽¹⁾`/`λ⁽²⁾` thresholds met at adjustment events so far.
    pub lambda1_threshold: f64,
    pub lambda2_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct AccelOutput {
    pub x: Vector,
    pub trace: IterationTrace,
    pub history: Vec<AccelRecord>,
}

/// Accelerated Type-I method.
pub fn accel_outer(oracle: &Oracle, config: &SolverConfig) -> Result<AccelOutput> {
    let (x0, m0) = prepare_start(oracle, config)?;
    if config.max_outer == 0 {
        return Ok(AccelOutput {
            x: x0,
            trace: IterationTrace { records: Vec::new(), stop: StopReason::MaxOuter, m0 },
            history: Vec::new(),
        });
    }
    let start = Instant::now();
    let grad_base = oracle.grad_calls();
    let value_base = oracle.value_calls();
    let mut mem = DirectionMemory::new(config.rule, config.n, oracle.dim(), config.h, config.seed)?;
    let mut records = Vec::new();
    let mut history = Vec::new();
    let record = |records: &mut Vec<IterationRecord>,
                  t: usize,
                  f: f64,
                  g: &Vector,
                  m: f64,
                  step_norm: f64,
                  backtracks: usize,
                  snap: Option<&MemorySnapshot>| {
        records.push(IterationRecord {
            t,
            oracle_calls: oracle.grad_calls() - grad_base,
            f,
            grad_norm: g.norm(),
            m,
            step_norm,
            backtracks,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            value_calls: oracle.value_calls() - value_base,
            memory_size: snap.map_or(0, |s| s.k()),
            kappa_d: snap.map_or(1.0, |s| s.kappa_d),
            diagnostics: StepDiagnostics::default(),
        });
    };

    // Bootstrap with one plain Type-I step.
    let f0 = oracle.value(&x0);
    let g0 = oracle.gradient(&x0);
    record(&mut records, 0, f0, &g0, m0, 0.0, 0, None);
    let stop_now = |t: usize, g: &Vector, calls: usize| -> Option<StopReason> {
        if g.norm() <= config.grad_tol {
            Some(StopReason::Converged)
        } else if t >= config.max_outer {
            Some(StopReason::MaxOuter)
        } else if calls >= config.max_oracle_calls {
            Some(StopReason::OracleBudget)
        } else {
            None
        }
    };
    if let Some(stop) = stop_now(0, &g0, oracle.grad_calls() - grad_base) {
        return Ok(AccelOutput { x: x0, trace: IterationTrace { records, stop, m0 }, history });
    }
    refresh_memory(&mut mem, oracle, &x0, &g0, config.kappa_max)?;
    let snap = mem.snapshot(&x0);
    let first = type1_backtrack_step(oracle, &snap, &x0, f0, &g0, m0)?;
    let mut x = first.x_plus;
    let mut fx = first.f_plus;
    let mut m = first.m;
    let mut g = oracle.gradient(&x);
    record(&mut records, 1, fx, &g, m, first.step_norm, first.backtracks, Some(&snap));

    let mut state = EstimateSequenceState {
        l0: fx,
        l1: Vector::zeros(oracle.dim()),
        lambda1: 0.0,
        lambda2: 0.0,
        t: 1,
        x0: x0.clone(),
    };
    let (_, phi1) = state.minimize();
    let mut thresholds = (0.0f64, 0.0f64);
    history.push(AccelRecord {
        t: 1,
        lambda1: 0.0,
        lambda2: 0.0,
        phi_min: phi1,
        weighted_f: fx,
        exit_flag: None,
        attempts: 0,
        lambda1_threshold: 0.0,
        lambda2_threshold: 0.0,
    });

    let mut t: u64 = 1;
    let stop = loop {
        if let Some(stop) = stop_now(t as usize, &g, oracle.grad_calls() - grad_base) {
            break stop;
        }
        refresh_memory(&mut mem, oracle, &x, &g, config.kappa_max)?;
        let b_next = schedule_b(t + 1) as f64;
        let big_b = schedule_big_b(t) as f64;
        let b_t = schedule_b(t) as f64;
        let big_b_next = schedule_big_b(t + 1) as f64;
        let beta = schedule_beta(t);
        let m_init = (m / 2.0).max(config.m_floor);
        let mut attempts = 0;
        let (step, f_plus, phi_plus, last_flag, total_backtracks, snap) = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS {
                return Err(Error::LambdaOverflow(state.lambda1.max(state.lambda2)));
            }
            let (v, _) = state.minimize();
            let y = &v * beta + &x * (1.0 - beta);
            let g_y = oracle.gradient(&y);
            let snap = mem.snapshot(&y);
            let step = accel_subroutine(oracle, &snap, &y, &g_y, m_init)?;
            let f_plus = oracle.value(&step.x_plus);
            let mut plus = state.clone();
            plus.add_linearization(b_t, f_plus, &step.x_plus, &step.g_plus);
            let (_, phi_plus) = plus.minimize();
            let target = big_b_next * f_plus;
            if phi_plus >= target - LOWER_BOUND_TOL * phi_plus.abs().max(1.0) {
                let (flag, backtracks) = (Some(step.exit_flag), step.backtracks);
                break (step, f_plus, phi_plus, flag, backtracks, snap);
            }
            match step.exit_flag {
                ExitFlag::LargeStep => {
                    let threshold = 4.0 / 3f64.sqrt() * b_next.powi(3) / (big_b * big_b) * step.m;
                    thresholds.1 = thresholds.1.max(threshold);
                    state.lambda2 = if state.lambda2 == 0.0 { threshold.max(f64::MIN_POSITIVE) } else { 2.0 * state.lambda2 };
                }
                ExitFlag::SmallStep => {
                    let threshold = b_next * b_next / big_b * step.m * (step.gamma + step.step_norm);
                    thresholds.0 = thresholds.0.max(threshold);
                    state.lambda1 = if state.lambda1 == 0.0 { threshold.max(f64::MIN_POSITIVE) } else { 2.0 * state.lambda1 };
                }
            }
            if state.lambda1 > LAMBDA_OVERFLOW || state.lambda2 > LAMBDA_OVERFLOW {
                return Err(Error::LambdaOverflow(state.lambda1.max(state.lambda2)));
            }
        };
        state.add_linearization(b_t, f_plus, &step.x_plus, &step.g_plus);
        t += 1;
        state.t = t;
        history.push(AccelRecord {
            t,
            lambda1: state.lambda1,
            lambda2: state.lambda2,
            phi_min: phi_plus,
            weighted_f: big_b_next * f_plus,
            exit_flag: last_flag,
            attempts,
            lambda1_threshold: thresholds.0,
            lambda2_threshold: thresholds.1,
        });
        let step_norm = (&step.x_plus - &x).norm();
        x = step.x_plus;
        fx = f_plus;
        g = step.g_plus;
        m = step.m;
        record(&mut records, t as usize, fx, &g, m, step_norm, total_backtracks, Some(&snap));
    };
    Ok(AccelOutput { x, trace: IterationTrace { records, stop, m0 }, history })
}
