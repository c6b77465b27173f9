//! First-order oracles, built-in test problems and dataset ingestion.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// A twice-differentiable objective.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &Vector) -> f64;
    fn gradient(&self, x: &Vector) -> Vector;

    /// Exact Hessian, only available for test problems.
    fn hessian(&self, _x: &Vector) -> Option<Matrix> {
        None
    }

    /// Lipschitz constant of the Hessian, when known.
    fn hessian_lipschitz(&self) -> Option<f64> {
        None
    }
}

/// Wraps an [`Objective`] and counts evaluations.
///
/// Gradient calls are the cost unit reported in traces; function values are
/// counted separately.
pub struct Oracle {
    objective: Box<dyn Objective>,
    grad_calls: AtomicUsize,
    value_calls: AtomicUsize,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("dim", &self.dim())
            .field("grad_calls", &self.grad_calls())
            .field("value_calls", &self.value_calls())
            .finish()
    }
}

impl Oracle {
    pub fn new(objective: impl Objective + 'static) -> Self {
        Self::from_boxed(Box::new(objective))
    }

    pub fn from_boxed(objective: Box<dyn Objective>) -> Self {
        Self {
            objective,
            grad_calls: AtomicUsize::new(0),
            value_calls: AtomicUsize::new(0),
        }
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn value(&self, x: &Vector) -> f64 {
        self.value_calls.fetch_add(1, Ordering::Relaxed);
        self.objective.value(x)
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        self.grad_calls.fetch_add(1, Ordering::Relaxed);
        self.objective.gradient(x)
    }

    /// Not counted: only test code and diagnostics use it.
    pub fn hessian(&self, x: &Vector) -> Option<Matrix> {
        self.objective.hessian(x)
    }

    pub fn hessian_lipschitz(&self) -> Option<f64> {
        self.objective.hessian_lipschitz()
    }

    pub fn grad_calls(&self) -> usize {
        self.grad_calls.load(Ordering::Relaxed)
    }

    pub fn value_calls(&self) -> usize {
        self.value_calls.load(Ordering::Relaxed)
    }

    pub fn objective(&self) -> &dyn Objective {
        self.objective.as_ref()
    }
}

/// `f(x) = ½‖Ax − b‖²`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    a: Matrix,
    b: Vector,
}

impl Objective for Quadratic {
    fn dim(&self) -> usize {
        self.a.ncols()
    }
    fn value(&self, x: &Vector) -> f64 {
        0.5 * (&self.a * x - &self.b).norm_squared()
    }
    fn gradient(&self, x: &Vector) -> Vector {
        self.a.tr_mul(&(&self.a * x - &self.b))
    }
    fn hessian(&self, _x: &Vector) -> Option<Matrix> {
        Some(self.a.tr_mul(&self.a))
    }
    fn hessian_lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
}

pub fn make_quadratic(a: Matrix, b: Vector) -> Result<Oracle> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.len() });
    }
    Ok(Oracle::new(Quadratic { a, b }))
}

/// `f(x) = ½‖Ax − b‖² + (c/3)‖x‖³`.
#[derive(Debug, Clone)]
pub struct CubicRegularizedLs {
    a: Matrix,
    b: Vector,
    c: f64,
}

impl Objective for CubicRegularizedLs {
    fn dim(&self) -> usize {
        self.a.ncols()
    }
    fn value(&self, x: &Vector) -> f64 {
        0.5 * (&self.a * x - &self.b).norm_squared() + self.c / 3.0 * x.norm().powi(3)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        self.a.tr_mul(&(&self.a * x - &self.b)) + x * (self.c * x.norm())
    }
    fn hessian(&self, x: &Vector) -> Option<Matrix> {
        let mut h = self.a.tr_mul(&self.a);
        let nx = x.norm();
        if nx > 0.0 {
            let d = x.len();
            h += Matrix::identity(d, d) * (self.c * nx) + (x * x.transpose()) * (self.c / nx);
        }
        Some(h)
    }
    fn hessian_lipschitz(&self) -> Option<f64> {
        Some(2.0 * self.c)
    }
}

pub fn make_cubic_regularized_ls(a: Matrix, b: Vector, c: f64) -> Result<Oracle> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.len() });
    }
    if !(c >= 0.0) {
        return Err(Error::InvalidConfig(format!("cubic weight must be nonnegative, got {c}")));
    }
    Ok(Oracle::new(CubicRegularizedLs { a, b, c }))
}

/// Regularized logistic loss `Σ log(1 + exp(−bᵢ aᵢᵀx)) + (reg/2)‖x‖²`.
#[derive(Debug, Clone)]
pub struct Logistic {
    a: Matrix,
    b: Vector,
    reg: f64,
    lipschitz: f64,
}

fn softplus(z: f64) -> f64 {
    // log(1 + e^z)
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Objective for Logistic {
    fn dim(&self) -> usize {
        self.a.ncols()
    }
    fn value(&self, x: &Vector) -> f64 {
        let margins = &self.a * x;
        let loss: f64 = margins.iter().zip(self.b.iter()).map(|(m, b)| softplus(-b * m)).sum();
        loss + 0.5 * self.reg * x.norm_squared()
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let margins = &self.a * x;
        let w = Vector::from_iterator(
            margins.len(),
            margins.iter().zip(self.b.iter()).map(|(m, b)| -b * sigmoid(-b * m)),
        );
        self.a.tr_mul(&w) + x * self.reg
    }
    fn hessian(&self, x: &Vector) -> Option<Matrix> {
        let margins = &self.a * x;
        let mut scaled = self.a.clone();
        for (i, m) in margins.iter().enumerate() {
            let s = sigmoid(*m);
            scaled.row_mut(i).scale_mut(s * (1.0 - s));
        }
        let d = x.len();
        Some(self.a.tr_mul(&scaled) + Matrix::identity(d, d) * self.reg)
    }
    fn hessian_lipschitz(&self) -> Option<f64> {
        Some(self.lipschitz)
    }
}

pub fn make_logistic(data: &Dataset, reg: f64) -> Result<Oracle> {
    if let Some(&bad) = data.labels.iter().find(|&&l| l != 1.0 && l != -1.0) {
        return Err(Error::InvalidLabel(bad));
    }
    if !(reg >= 0.0) {
        return Err(Error::InvalidConfig(format!("regularization must be nonnegative, got {reg}")));
    }
    // |σ''| ≤ 1/(6√3) bounds the third derivative of the loss along each row.
    let lipschitz = data
        .features
        .row_iter()
        .map(|r| r.norm().powi(3))
        .sum::<f64>()
        / (6.0 * 3f64.sqrt());
    Ok(Oracle::new(Logistic {
        a: data.features.clone(),
        b: data.labels.clone(),
        reg,
        lipschitz,
    }))
}

/// Generalized Rosenbrock function.
#[derive(Debug, Clone)]
pub struct Rosenbrock {
    d: usize,
}

impl Objective for Rosenbrock {
    fn dim(&self) -> usize {
        self.d
    }
    fn value(&self, x: &Vector) -> f64 {
        (0..self.d - 1)
            .map(|i| 100.0 * (x[i + 1] - x[i] * x[i]).powi(2) + (1.0 - x[i]).powi(2))
            .sum()
    }
    fn gradient(&self, x: &Vector) -> Vector {
        let mut g = Vector::zeros(self.d);
        for i in 0..self.d - 1 {
            let t = x[i + 1] - x[i] * x[i];
            g[i] += -400.0 * x[i] * t - 2.0 * (1.0 - x[i]);
            g[i + 1] += 200.0 * t;
        }
        g
    }
    fn hessian(&self, x: &Vector) -> Option<Matrix> {
        let mut h = Matrix::zeros(self.d, self.d);
        for i in 0..self.d - 1 {
            h[(i, i)] += 1200.0 * x[i] * x[i] - 400.0 * x[i + 1] + 2.0;
            h[(i, i + 1)] += -400.0 * x[i];
            h[(i + 1, i)] += -400.0 * x[i];
            h[(i + 1, i + 1)] += 200.0;
        }
        Some(h)
    }
    fn hessian_lipschitz(&self) -> Option<f64> {
        // Conservative on the unit box; diagnostics only.
        Some(1200.0)
    }
}

pub fn make_rosenbrock(d: usize) -> Result<Oracle> {
    if d < 2 {
        return Err(Error::InvalidConfig(format!("rosenbrock needs d >= 2, got {d}")));
    }
    Ok(Oracle::new(Rosenbrock { d }))
}

/// Objective assembled from closures; handy for one-off test functions.
pub struct FnObjective<F, G> {
    dim: usize,
    value: F,
    gradient: G,
    lipschitz: Option<f64>,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&Vector) -> f64 + Send + Sync,
    G: Fn(&Vector) -> Vector + Send + Sync,
{
    pub fn new(dim: usize, value: F, gradient: G) -> Self {
        Self { dim, value, gradient, lipschitz: None }
    }

    pub fn with_hessian_lipschitz(mut self, l: f64) -> Self {
        self.lipschitz = Some(l);
        self
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&Vector) -> f64 + Send + Sync,
    G: Fn(&Vector) -> Vector + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &Vector) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &Vector) -> Vector {
        (self.gradient)(x)
    }
    fn hessian_lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Dense feature matrix with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vector,
}

const POWER_ITERATIONS: usize = 30;

impl Dataset {
    pub fn new(features: Matrix, labels: Vector) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
        }
        Ok(Self { features, labels })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Scales the features to unit spectral norm and appends a column of
    /// ones. The norm is estimated with a fixed number of power iterations.
    pub fn preprocess(&mut self) {
        let norm = spectral_norm_estimate(&self.features, POWER_ITERATIONS);
        if norm > 0.0 {
            self.features /= norm;
        }
        let n = self.features.nrows();
        let d = self.features.ncols();
        self.features = self.features.clone().insert_column(d, 1.0);
        debug_assert_eq!(self.features.nrows(), n);
    }

    /// Gaussian features and noisy linear labels.
    pub fn synthetic(n: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
        let features = Matrix::from_fn(n, d, |_, _| gauss());
        let truth = Vector::from_fn(d, |_, _| gauss());
        let margins = &features * &truth;
        let labels = Vector::from_iterator(
            n,
            margins.iter().map(|&m| if m + 0.5 * gauss() * m.abs().max(1.0) >= 0.0 { 1.0 } else { -1.0 }),
        );
        Self { features, labels }
    }
}

/// Largest singular value of `a` by power iteration on `AᵀA`.
pub fn spectral_norm_estimate(a: &Matrix, iterations: usize) -> f64 {
    let d = a.ncols();
    if d == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // Deterministic, non-degenerate start.
    let mut v = Vector::from_fn(d, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let w = a.tr_mul(&(a * &v));
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        sigma = nw.sqrt();
        v = w / nw;
    }
    sigma.max((a * &v).norm())
}

/// Parses LIBSVM text (`label idx:val ...`, 1-based indices) into a dense,
/// preprocessed dataset.
pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut data = parse_libsvm(&text)?;
    data.preprocess();
    Ok(data)
}

/// Parses LIBSVM text without preprocessing.
pub fn parse_libsvm(text: &str) -> Result<Dataset> {
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut n_features = 0;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line: lineno + 1, message };
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().ok_or_else(|| err("missing label".into()))?;
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(format!("bad label {label_tok:?}")))?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(format!("expected idx:val, got {tok:?}")))?;
            let idx: usize = idx.parse().map_err(|_| err(format!("bad index {idx:?}")))?;
            if idx == 0 {
                return Err(err("indices are 1-based".into()));
            }
            let val: f64 = val.parse().map_err(|_| err(format!("bad value {val:?}")))?;
            n_features = n_features.max(idx);
            entries.push((idx - 1, val));
        }
        rows.push(entries);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 0, message: "no samples".into() });
    }
    let mut features = Matrix::zeros(rows.len(), n_features);
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            features[(i, j)] = v;
        }
    }
    Dataset::new(features, Vector::from_vec(labels))
}

const ROUNDING_FACTOR: f64 = 8.0;

/// Finite-difference estimate of the Hessian Lipschitz constant:
///
/// `M₀ = 2‖∇f(x₀+s_{τh}) − ∇f(x₀) − τ[∇f(x₀+s_h) − ∇f(x₀)]‖ / ‖s_{τh}‖²`
/// with `s_h = h∇f(x₀)`. A remainder below the rounding level of the gradient
/// differences counts as zero. Clamped below at `1e-12`. Uses three gradient
/// calls.
pub fn estimate_initial_smoothness(oracle: &Oracle, x0: &Vector, h: f64, tau: f64) -> Result<f64> {
    if !(h > 0.0) || !(tau > 1.0) {
        return Err(Error::InvalidConfig(format!("need h > 0 and tau > 1, got h={h}, tau={tau}")));
    }
    let g0 = oracle.gradient(x0);
    if g0.norm() < 1e-14 {
        return Err(Error::ZeroGradient);
    }
    let s_h = &g0 * h;
    let s_tau = &g0 * (tau * h);
    let g_h = oracle.gradient(&(x0 + &s_h));
    let g_tau = oracle.gradient(&(x0 + &s_tau));
    let remainder = (&g_tau - &g0) - (&g_h - &g0) * tau;
    let noise = ROUNDING_FACTOR * f64::EPSILON * (g_tau.norm() + g0.norm() + tau * (g_h.norm() + g0.norm()));
    let signal = remainder.norm();
    let signal = if signal <= noise { 0.0 } else { signal };
    let m0 = 2.0 * signal / s_tau.norm_squared();
    if !m0.is_finite() {
        return Err(Error::NonFinite("estimate_initial_smoothness"));
    }
    Ok(m0.max(1e-12))
}

/// Checks a gradient against central differences of the value. Returns the
/// relative error `‖g − g_fd‖ / max(1, ‖g‖)`.
pub fn gradient_check(objective: &dyn Objective, x: &Vector, step: f64) -> f64 {
    let g = objective.gradient(x);
    let mut fd = Vector::zeros(x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = objective.value(&xp);
        xp[i] = orig - step;
        let fm = objective.value(&xp);
        xp[i] = orig;
        fd[i] = (fp - fm) / (2.0 * step);
    }
    (&g - fd).norm() / g.norm().max(1.0)
}

/// Matrix with i.i.d. standard normal entries, filled column by column.
pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}
