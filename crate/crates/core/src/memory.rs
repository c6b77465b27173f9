//! Direction memory `(Y, Z, D, G, ε)` and its update rules.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::oracle::Oracle;

/// How new secant pairs enter the memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UpdateRule {
    /// One forward estimate per iteration along the part of `−∇f` outside the
    /// current span.
    ForwardEstimate,
    /// A fresh random orthonormal basis every iteration.
    RandomOrthogonal,
    /// Past iterates plus the latest forward estimate.
    IteratesOnly,
    /// Past iterates and all forward estimates.
    Greedy,
    /// Greedy directions, orthonormalized and re-probed every iteration.
    OrthoBatch,
}

impl UpdateRule {
    pub const ALL: [UpdateRule; 5] = [
        UpdateRule::ForwardEstimate,
        UpdateRule::RandomOrthogonal,
        UpdateRule::IteratesOnly,
        UpdateRule::Greedy,
        UpdateRule::OrthoBatch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpdateRule::ForwardEstimate => "forward",
            UpdateRule::RandomOrthogonal => "random",
            UpdateRule::IteratesOnly => "iterates",
            UpdateRule::Greedy => "greedy",
            UpdateRule::OrthoBatch => "ortho-batch",
        }
    }

    /// Rules whose `D` is orthonormal by construction.
    pub fn is_orthonormal(self) -> bool {
        matches!(
            self,
            UpdateRule::ForwardEstimate | UpdateRule::RandomOrthogonal | UpdateRule::OrthoBatch
        )
    }

    /// Rules whose condition number must be capped by pruning.
    pub fn needs_pruning(self) -> bool {
        matches!(self, UpdateRule::IteratesOnly | UpdateRule::Greedy)
    }
}

impl fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdateRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" | "forward-estimate" => Ok(UpdateRule::ForwardEstimate),
            "random" | "random-orthogonal" => Ok(UpdateRule::RandomOrthogonal),
            "iterates" | "iterates-only" => Ok(UpdateRule::IteratesOnly),
            "greedy" => Ok(UpdateRule::Greedy),
            "ortho-batch" | "ortho" => Ok(UpdateRule::OrthoBatch),
            other => Err(Error::InvalidConfig(format!("unknown update rule {other:?}"))),
        }
    }
}

/// Why an update left the memory unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Skip {
    /// The gradient already lies in the span of `D`.
    DegenerateDirection,
    /// Two consecutive points coincide.
    DuplicateIterate,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    pub added: usize,
    pub evicted: usize,
    pub skipped: Vec<Skip>,
}

const PAIR_RESOLUTION: f64 = 1e-10;

/// One secant pair. `dir` and `gcol` are already divided by `dist`.
#[derive(Debug, Clone)]
struct Pair {
    y: Vector,
    z: Vector,
    dir: Vector,
    gcol: Vector,
    dist: f64,
}

impl Pair {
    /// Builds the pair from two points and their gradients. Returns `None`
    /// when the points coincide to within `PAIR_RESOLUTION`; the
    /// gradient difference of such a pair is dominated by rounding.
    fn from_points(y: Vector, z: Vector, gy: &Vector, gz: &Vector) -> Option<Self> {
        let diff = &y - &z;
        let dist = diff.norm();
        let scale = y.norm().max(z.norm()).max(1.0);
        if !(dist > PAIR_RESOLUTION * scale) {
            return None;
        }
        Some(Pair { dir: diff / dist, gcol: (gy - gz) / dist, y, z, dist })
    }

    /// Probe along a unit direction; the nominal direction and step are kept
    /// so orthonormality is not polluted by rounding in `x + h d`.
    fn probe(oracle: &Oracle, x: &Vector, g: &Vector, dir: Vector, h: f64) -> Self {
        let y = x + &dir * h;
        let gy = oracle.gradient(&y);
        Pair { gcol: (gy - g) / h, y, z: x.clone(), dir, dist: h }
    }
}

/// Matrices handed to a subproblem, with `ε` centered at `x`.
#[derive(Debug, Clone)]
pub struct MemorySnapshot {
    pub d: Matrix,
    pub g: Matrix,
    pub eps: Vector,
    pub norm_d: f64,
    pub kappa_d: f64,
    pub orthonormal: bool,
}

impl MemorySnapshot {
    pub fn k(&self) -> usize {
        self.d.ncols()
    }

    /// `‖ε‖ / ‖D‖`, the relative error level of the memory.
    pub fn relative_error(&self) -> f64 {
        self.eps.norm() / self.norm_d
    }
}

/// The direction memory of one solver run.
#[derive(Debug, Clone)]
pub struct DirectionMemory {
    rule: UpdateRule,
    capacity: usize,
    dim: usize,
    h: f64,
    pairs: VecDeque<Pair>,
    rng: ChaCha8Rng,
    // Previous iterate, its gradient, and the forward point taken from it.
    prev: Option<(Vector, Vector)>,
    prev_half: Option<(Vector, Vector)>,
    // Raw online directions for the batch rule, newest first.
    online: VecDeque<Vector>,
}

const MAX_QR_RETRIES: usize = 5;

impl DirectionMemory {
    pub fn new(rule: UpdateRule, capacity: usize, dim: usize, h: f64, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("memory capacity must be positive".into()));
        }
        if capacity > dim {
            return Err(Error::InvalidConfig(format!(
                "memory capacity {capacity} exceeds dimension {dim}"
            )));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidConfig(format!("h must be positive, got {h}")));
        }
        Ok(Self {
            rule,
            capacity,
            dim,
            h,
            pairs: VecDeque::with_capacity(capacity + 2),
            rng: ChaCha8Rng::seed_from_u64(seed),
            prev: None,
            prev_half: None,
            online: VecDeque::new(),
        })
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn stack(&self, f: impl Fn(&Pair) -> &Vector) -> Matrix {
        let cols: Vec<Vector> = self.pairs.iter().map(|p| f(p).clone()).collect();
        if cols.is_empty() {
            Matrix::zeros(self.dim, 0)
        } else {
            Matrix::from_columns(&cols)
        }
    }

    /// Columns are stored oldest first.
    pub fn d_matrix(&self) -> Matrix {
        self.stack(|p| &p.dir)
    }

    pub fn g_matrix(&self) -> Matrix {
        self.stack(|p| &p.gcol)
    }

    pub fn y_matrix(&self) -> Matrix {
        self.stack(|p| &p.y)
    }

    pub fn z_matrix(&self) -> Matrix {
        self.stack(|p| &p.z)
    }

    /// `eᵢ = ‖yᵢ − zᵢ‖ + 2‖zᵢ − x‖`.
    pub fn compute_error_vector(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            self.pairs.len(),
            self.pairs.iter().map(|p| p.dist + 2.0 * (&p.z - x).norm()),
        )
    }

    pub fn norm_d(&self) -> f64 {
        if self.is_empty() { 0.0 } else { linalg::spectral_norm(&self.d_matrix()) }
    }

    pub fn kappa_d(&self) -> f64 {
        if self.is_empty() { 1.0 } else { linalg::condition_number(&self.d_matrix()) }
    }

    pub fn snapshot(&self, x: &Vector) -> MemorySnapshot {
        let d = self.d_matrix();
        let sv = if d.ncols() == 0 { Vec::new() } else { linalg::singular_values(&d).as_slice().to_vec() };
        let norm_d = sv.first().copied().unwrap_or(0.0);
        let kappa_d = match sv.last() {
            None => 1.0,
            Some(&smin) if smin < linalg::SINGULAR_TOL * norm_d || smin == 0.0 => f64::INFINITY,
            Some(&smin) => (norm_d / smin).max(1.0),
        };
        MemorySnapshot {
            g: self.g_matrix(),
            eps: self.compute_error_vector(x),
            d,
            norm_d,
            kappa_d,
            orthonormal: self.rule.is_orthonormal(),
        }
    }

    fn evict_to(&mut self, keep: usize, outcome: &mut UpdateOutcome) {
        while self.pairs.len() > keep {
            self.pairs.pop_front();
            outcome.evicted += 1;
        }
    }

    /// Applies the configured rule at `x` with `g = ∇f(x)` already evaluated.
    pub fn update(&mut self, oracle: &Oracle, x: &Vector, g: &Vector) -> Result<UpdateOutcome> {
        match self.rule {
            UpdateRule::ForwardEstimate => self.update_forward_estimate(oracle, x, g),
            UpdateRule::RandomOrthogonal => self.update_random_orthogonal(oracle, x, g),
            UpdateRule::IteratesOnly => self.update_iterates_only(oracle, x, g),
            UpdateRule::Greedy => self.update_greedy(oracle, x, g),
            UpdateRule::OrthoBatch => self.orthogonalize_batch(oracle, x, g),
        }
    }

    /// Adds `d = −d̃/‖d̃‖` with `d̃ = g − D(Dᵀg)`, evicting the oldest pair
    /// when full. One gradient call.
    pub fn update_forward_estimate(
        &mut self,
        oracle: &Oracle,
        x: &Vector,
        g: &Vector,
    ) -> Result<UpdateOutcome> {
        let mut outcome = UpdateOutcome::default();
        let gnorm = g.norm();
        let skip_oldest = usize::from(self.pairs.len() >= self.capacity);
        let mut residual = g.clone();
        // Two passes keep the new column orthogonal to working precision.
        for _ in 0..2 {
            for p in self.pairs.iter().skip(skip_oldest) {
                let c = p.dir.dot(&residual);
                residual.axpy(-c, &p.dir, 1.0);
            }
        }
        let rnorm = residual.norm();
        if gnorm == 0.0 || rnorm < 1e-12 * gnorm {
            outcome.skipped.push(Skip::DegenerateDirection);
            return Ok(outcome);
        }
        self.evict_to(self.capacity - 1, &mut outcome);
        let dir = residual / -rnorm;
        self.pairs.push_back(Pair::probe(oracle, x, g, dir, self.h));
        outcome.added = 1;
        Ok(outcome)
    }

    fn random_orthonormal_completion(&mut self, base: &Matrix, n: usize) -> Result<Matrix> {
        let have = base.ncols();
        if have >= n {
            return Ok(base.columns(0, n).into_owned());
        }
        for _ in 0..MAX_QR_RETRIES {
            let extra = Matrix::from_fn(self.dim, n - have, |_, _| StandardNormal.sample(&mut self.rng));
            let mut full = base.clone().resize_horizontally(n, 0.0);
            full.columns_mut(have, n - have).copy_from(&extra);
            if let Ok(q) = linalg::qr_orthonormalize(&full) {
                return Ok(q);
            }
        }
        Err(Error::RankDeficient { column: have })
    }

    fn reprobe(&mut self, oracle: &Oracle, x: &Vector, g: &Vector, q: &Matrix) {
        self.pairs.clear();
        for j in 0..q.ncols() {
            let dir = q.column(j).into_owned();
            self.pairs.push_back(Pair::probe(oracle, x, g, dir, self.h));
        }
    }

    /// Replaces the memory by `N` random orthonormal probes around `x`.
    /// `N` gradient calls.
    pub fn update_random_orthogonal(
        &mut self,
        oracle: &Oracle,
        x: &Vector,
        g: &Vector,
    ) -> Result<UpdateOutcome> {
        let evicted = self.pairs.len();
        let q = self.random_orthonormal_completion(&Matrix::zeros(self.dim, 0), self.capacity)?;
        self.reprobe(oracle, x, g, &q);
        Ok(UpdateOutcome { added: q.ncols(), evicted, skipped: Vec::new() })
    }

    /// Memory of iterate differences plus the newest forward pair
    /// `(x − h∇f(x), x)`. One gradient call.
    pub fn update_iterates_only(
        &mut self,
        oracle: &Oracle,
        x: &Vector,
        g: &Vector,
    ) -> Result<UpdateOutcome> {
        let mut outcome = UpdateOutcome::default();
        // The previous forward pair is replaced by the iterate pair.
        if self.prev_half.is_some() && !self.pairs.is_empty() {
            self.pairs.pop_back();
            outcome.evicted += 1;
        }
        if let Some((xp, gp)) = self.prev.take() {
            match Pair::from_points(x.clone(), xp, g, &gp) {
                Some(p) => {
                    self.pairs.push_back(p);
                    outcome.added += 1;
                }
                None => outcome.skipped.push(Skip::DuplicateIterate),
            }
        }
        self.push_forward_pair(oracle, x, g, &mut outcome);
        self.prev = Some((x.clone(), g.clone()));
        let cap = self.capacity;
        self.evict_to(cap, &mut outcome);
        Ok(outcome)
    }

    /// Keeps all iterates and forward points: adds `(x_t, x_{t−½})` and
    /// `(x_{t+½}, x_t)`. One gradient call.
    pub fn update_greedy(&mut self, oracle: &Oracle, x: &Vector, g: &Vector) -> Result<UpdateOutcome> {
        let mut outcome = UpdateOutcome::default();
        if let Some((xh, gh)) = self.prev_half.take() {
            match Pair::from_points(x.clone(), xh, g, &gh) {
                Some(p) => {
                    self.pairs.push_back(p);
                    outcome.added += 1;
                }
                None => outcome.skipped.push(Skip::DuplicateIterate),
            }
        }
        self.push_forward_pair(oracle, x, g, &mut outcome);
        self.prev = Some((x.clone(), g.clone()));
        let cap = self.capacity;
        self.evict_to(cap, &mut outcome);
        Ok(outcome)
    }

    /// Forward point `x − h∇f(x)`. When that step is below the pair
    /// resolution the point is taken at distance `h` along `−∇f(x)` instead,
    /// so the descent direction stays in the memory near a minimizer.
    fn push_forward_pair(&mut self, oracle: &Oracle, x: &Vector, g: &Vector, outcome: &mut UpdateOutcome) {
        let gnorm = g.norm();
        if gnorm == 0.0 {
            self.prev_half = None;
            outcome.skipped.push(Skip::DuplicateIterate);
            return;
        }
        let scale = x.norm().max(1.0);
        let step = if self.h * gnorm > PAIR_RESOLUTION * scale { self.h } else { self.h / gnorm };
        let half = x - g * step;
        let gh = oracle.gradient(&half);
        match Pair::from_points(half.clone(), x.clone(), &gh, g) {
            Some(p) => {
                self.pairs.push_back(p);
                outcome.added += 1;
                self.prev_half = Some((half, gh));
            }
            None => {
                self.prev_half = None;
                outcome.skipped.push(Skip::DuplicateIterate);
            }
        }
    }

    /// Orthonormalizes the online directions (newest `−∇f` first, then past
    /// steps and gradients), completes them to `N` columns with random
    /// directions and re-probes each one from `x`. `N` gradient calls.
    pub fn orthogonalize_batch(
        &mut self,
        oracle: &Oracle,
        x: &Vector,
        g: &Vector,
    ) -> Result<UpdateOutcome> {
        if let Some((xp, _)) = &self.prev {
            let step = x - xp;
            if step.norm() > 0.0 {
                self.online.push_front(step);
            }
        }
        if g.norm() > 0.0 {
            self.online.push_front(-g);
        }
        self.online.truncate(2 * self.capacity);
        self.prev = Some((x.clone(), g.clone()));

        let evicted = self.pairs.len();
        let mut skipped = Vec::new();
        let cols: Vec<Vector> = self.online.iter().cloned().collect();
        let base = if cols.is_empty() {
            Matrix::zeros(self.dim, 0)
        } else {
            let (q, kept) = linalg::qr_orthonormalize_independent(&Matrix::from_columns(&cols));
            if kept.len() < cols.len() {
                skipped.push(Skip::DegenerateDirection);
            }
            q
        };
        let q = self.random_orthonormal_completion(&base, self.capacity)?;
        self.reprobe(oracle, x, g, &q);
        Ok(UpdateOutcome { added: q.ncols(), evicted, skipped })
    }

    /// Drops the oldest pairs until `κ_D ≤ kappa_max`, always keeping the
    /// newest. Returns the number of dropped pairs.
    pub fn prune(&mut self, kappa_max: f64) -> usize {
        let mut dropped = 0;
        while self.pairs.len() > 1 && self.kappa_d() > kappa_max {
            self.pairs.pop_front();
            dropped += 1;
        }
        dropped
    }

    /// Inserts a raw pair; used by tests and by callers assembling memories
    /// by hand. Returns `false` when the points coincide.
    pub fn push_pair(&mut self, y: Vector, z: Vector, gy: &Vector, gz: &Vector) -> bool {
        match Pair::from_points(y, z, gy, gz) {
            Some(p) => {
                self.pairs.push_back(p);
                if self.pairs.len() > self.capacity {
                    self.pairs.pop_front();
                }
                true
            }
            None => false,
        }
    }
}

/// A Haar-distributed `d×n` orthonormal matrix.
pub fn random_orthonormal(d: usize, n: usize, rng: &mut impl rand::Rng) -> Result<Matrix> {
    for _ in 0..MAX_QR_RETRIES {
        let a = Matrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut *rng));
        if let Ok(q) = linalg::qr_orthonormalize(&a) {
            return Ok(q);
        }
    }
    Err(Error::RankDeficient { column: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs, project};
    use crate::oracle::{make_quadratic, make_rosenbrock};

    fn vec(v: &[f64]) -> Vector {
        Vector::from_column_slice(v)
    }

    fn diag_quadratic(d: usize) -> Oracle {
        let a = Matrix::from_diagonal(&Vector::from_fn(d, |i, _| 1.0 + i as f64));
        make_quadratic(a, Vector::from_element(d, 1.0)).unwrap()
    }

    #[test]
    fn error_vector_examples() {
        let mut m = DirectionMemory::new(UpdateRule::Greedy, 1, 1, 1e-3, 0).unwrap();
        let z = vec(&[0.0]);
        assert!(m.push_pair(vec(&[1.5]), vec(&[1.0]), &z, &z));
        let e = m.compute_error_vector(&vec(&[0.2]));
        assert!((e[0] - 2.1).abs() < 1e-15);
        assert!(!m.push_pair(vec(&[0.3]), vec(&[0.3]), &z, &z));
    }

    #[test]
    fn batch_error_vector_is_h() {
        let o = diag_quadratic(6);
        let mut m = DirectionMemory::new(UpdateRule::RandomOrthogonal, 4, 6, 1e-4, 3).unwrap();
        let x = Vector::from_element(6, 0.5);
        let g = o.gradient(&x);
        m.update(&o, &x, &g).unwrap();
        assert!(m.compute_error_vector(&x).iter().all(|&e| e == 1e-4));
        let s = m.snapshot(&x);
        assert!((s.relative_error() - 1e-4 * 2.0 / s.norm_d).abs() < 1e-15);
    }

    #[test]
    fn forward_first_update() {
        let o = diag_quadratic(2);
        let mut m = DirectionMemory::new(UpdateRule::ForwardEstimate, 2, 2, 1e-6, 0).unwrap();
        let x = Vector::zeros(2);
        let g = vec(&[3.0, 4.0]);
        let before = o.grad_calls();
        let out = m.update(&o, &x, &g).unwrap();
        assert_eq!(o.grad_calls() - before, 1);
        assert_eq!(out.added, 1);
        let d = m.d_matrix();
        assert!((d.column(0) - vec(&[-0.6, -0.8])).norm() < 1e-15);
    }

    #[test]
    fn forward_g_column_on_quadratic() {
        let d = 5;
        let a = Matrix::from_fn(d, d, |i, j| 1.0 / (1.0 + i as f64 + j as f64));
        let o = make_quadratic(a.clone(), Vector::zeros(d)).unwrap();
        let h = 1e-3;
        let mut m = DirectionMemory::new(UpdateRule::ForwardEstimate, 3, d, h, 0).unwrap();
        let x = Vector::from_fn(d, |i, _| (i as f64).sin() + 0.3);
        let g = o.gradient(&x);
        m.update(&o, &x, &g).unwrap();
        let hess = a.tr_mul(&a);
        let expected = &hess * m.d_matrix().column(0);
        assert!((m.g_matrix().column(0) - expected).norm() < 1e-9 / h);
    }

    #[test]
    fn forward_ring_buffer_and_orthonormality() {
        let o = make_rosenbrock(8).unwrap();
        let n = 3;
        let mut m = DirectionMemory::new(UpdateRule::ForwardEstimate, n, 8, 1e-7, 0).unwrap();
        let mut x = Vector::from_fn(8, |i, _| 0.1 * i as f64);
        for _ in 0..(n + 2) {
            let g = o.gradient(&x);
            m.update(&o, &x, &g).unwrap();
            let d = m.d_matrix();
            let gram = d.tr_mul(&d) - Matrix::identity(d.ncols(), d.ncols());
            assert!(max_abs(&gram) <= 1e-8);
            let pg = project(&d, &g).unwrap();
            assert!((pg - &g).norm() <= 1e-8 * g.norm());
            x -= &g * 1e-4;
        }
        assert_eq!(m.len(), n);
    }

    #[test]
    fn forward_degenerate_direction_is_skipped() {
        let o = diag_quadratic(3);
        let mut m = DirectionMemory::new(UpdateRule::ForwardEstimate, 3, 3, 1e-6, 0).unwrap();
        let x = Vector::zeros(3);
        let g = vec(&[1.0, 0.0, 0.0]);
        m.update(&o, &x, &g).unwrap();
        let out = m.update(&o, &x, &(g * 2.0)).unwrap();
        assert_eq!(out.skipped, vec![Skip::DegenerateDirection]);
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn random_orthogonal_full_basis() {
        let o = diag_quadratic(4);
        let mut m = DirectionMemory::new(UpdateRule::RandomOrthogonal, 4, 4, 1e-6, 9).unwrap();
        let x = Vector::zeros(4);
        let g = o.gradient(&x);
        let before = o.grad_calls();
        m.update(&o, &x, &g).unwrap();
        assert_eq!(o.grad_calls() - before, 4);
        let d = m.d_matrix();
        assert!(max_abs(&(&d * d.transpose() - Matrix::identity(4, 4))) < 1e-10);
    }

    #[test]
    fn random_orthogonal_is_deterministic() {
        let o = diag_quadratic(5);
        let x = Vector::zeros(5);
        let g = o.gradient(&x);
        let run = |seed| {
            let mut m = DirectionMemory::new(UpdateRule::RandomOrthogonal, 2, 5, 1e-6, seed).unwrap();
            m.update(&o, &x, &g).unwrap();
            m.d_matrix()
        };
        assert_eq!(run(4), run(4));
        assert_ne!(run(4), run(5));
    }

    #[test]
    fn iterates_only_structure() {
        let o = diag_quadratic(4);
        let mut m = DirectionMemory::new(UpdateRule::IteratesOnly, 3, 4, 1e-6, 0).unwrap();
        let x0 = Vector::from_element(4, 1.0);
        let g0 = o.gradient(&x0);
        m.update(&o, &x0, &g0).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.z_matrix().column(0), x0.column(0));

        // Stagnant iterate: the iterate pair is skipped, the forward pair replaced.
        let out = m.update(&o, &x0, &g0).unwrap();
        assert_eq!(out.skipped, vec![Skip::DuplicateIterate]);
        assert_eq!(m.len(), 1);

        let x1 = &x0 - &g0 * 0.1;
        let g1 = o.gradient(&x1);
        m.update(&o, &x1, &g1).unwrap();
        assert_eq!(m.len(), 2);
        let y = m.y_matrix();
        let z = m.z_matrix();
        assert_eq!(y.column(0), x1.column(0));
        assert_eq!(z.column(0), x0.column(0));
        assert_eq!(z.column(1), x1.column(0));
        assert_eq!(y.column(1), (&x1 - &g1 * 1e-6).column(0));
    }

    #[test]
    fn greedy_adds_two_columns() {
        let o = diag_quadratic(6);
        let mut m = DirectionMemory::new(UpdateRule::Greedy, 6, 6, 1e-3, 0).unwrap();
        let mut x = Vector::from_element(6, 1.0);
        let g = o.gradient(&x);
        m.update(&o, &x, &g).unwrap();
        assert_eq!(m.len(), 1);
        x -= &g * 0.05;
        let g = o.gradient(&x);
        let out = m.update(&o, &x, &g).unwrap();
        assert_eq!(out.added, 2);
        assert_eq!(m.len(), 3);
        // Quadratic: every secant pair is exact.
        let a = Matrix::from_diagonal(&Vector::from_fn(6, |i, _| 1.0 + i as f64));
        let hess = a.tr_mul(&a);
        let resid = &hess * m.d_matrix() - m.g_matrix();
        assert!(max_abs(&resid) < 1e-9);
    }

    #[test]
    fn greedy_prune_respects_cap() {
        let o = make_rosenbrock(10).unwrap();
        let mut m = DirectionMemory::new(UpdateRule::Greedy, 10, 10, 1e-9, 0).unwrap();
        let mut x = Vector::from_fn(10, |i, _| 0.05 * i as f64);
        for _ in 0..12 {
            let g = o.gradient(&x);
            m.update(&o, &x, &g).unwrap();
            m.prune(1e9);
            assert!(m.kappa_d() <= 1e9);
            x -= &g * 1e-4;
        }
    }

    #[test]
    fn prune_drops_oldest_duplicate() {
        let mut m = DirectionMemory::new(UpdateRule::Greedy, 3, 3, 1e-3, 0).unwrap();
        let z = Vector::zeros(3);
        let e1 = vec(&[1.0, 0.0, 0.0]);
        let e2 = vec(&[0.0, 1.0, 0.0]);
        m.push_pair(e1.clone(), z.clone(), &z, &z);
        m.push_pair(e2.clone(), z.clone(), &z, &z);
        m.push_pair(e1.clone(), z.clone(), &z, &z);
        assert!(m.kappa_d().is_infinite());
        assert_eq!(m.prune(1e9), 1);
        assert_eq!(m.len(), 2);
        assert!(m.kappa_d().is_finite());
        assert_eq!(m.prune(10.0), 0);
    }

    #[test]
    fn prune_matches_brute_force_on_near_collinear() {
        let mut m = DirectionMemory::new(UpdateRule::Greedy, 3, 3, 1e-3, 0).unwrap();
        let z = Vector::zeros(3);
        let cols = [vec(&[1.0, 1e-5, 0.0]), vec(&[1.0, 0.0, 1e-5]), vec(&[1.0, 0.0, 0.0])];
        for c in &cols {
            m.push_pair(c.clone(), z.clone(), &z, &z);
        }
        let full = m.d_matrix();
        // Smallest number of oldest columns to drop, by exhaustion.
        let expected = (0..3)
            .find(|&drop| drop == 2 || linalg::condition_number(&full.columns(drop, 3 - drop).into_owned()) <= 1e3)
            .unwrap();
        assert!(expected > 0);
        assert_eq!(m.prune(1e3), expected);
        assert!(m.len() == 1 || m.kappa_d() <= 1e3);
    }

    #[test]
    fn ortho_batch_is_orthonormal_and_contains_gradient() {
        let o = make_rosenbrock(6).unwrap();
        let mut m = DirectionMemory::new(UpdateRule::OrthoBatch, 3, 6, 1e-6, 1).unwrap();
        let mut x = Vector::from_fn(6, |i, _| 0.2 * i as f64);
        for _ in 0..4 {
            let g = o.gradient(&x);
            let before = o.grad_calls();
            m.update(&o, &x, &g).unwrap();
            assert_eq!(o.grad_calls() - before, 3);
            let d = m.d_matrix();
            assert!(max_abs(&(d.tr_mul(&d) - Matrix::identity(3, 3))) < 1e-10);
            assert!((m.kappa_d() - 1.0).abs() < 1e-8);
            assert!(m.compute_error_vector(&x).iter().all(|&e| e == 1e-6));
            assert!((project(&d, &g).unwrap() - &g).norm() < 1e-8 * g.norm());
            // First column is oriented along its source, −g.
            assert!(d.column(0).dot(&g) < 0.0);
            x -= &g * 1e-3;
        }
    }

    #[test]
    fn capacity_must_fit_dimension() {
        assert!(DirectionMemory::new(UpdateRule::ForwardEstimate, 4, 3, 1e-9, 0).is_err());
        assert!(DirectionMemory::new(UpdateRule::ForwardEstimate, 0, 3, 1e-9, 0).is_err());
        assert!(DirectionMemory::new(UpdateRule::ForwardEstimate, 2, 3, 0.0, 0).is_err());
    }

    #[test]
    fn rule_names_round_trip() {
        for r in UpdateRule::ALL {
            assert_eq!(r.name().parse::<UpdateRule>().unwrap(), r);
        }
        assert!("bogus".parse::<UpdateRule>().is_err());
    }
}
