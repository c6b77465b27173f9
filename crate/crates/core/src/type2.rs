//! Type-II model: `‖∇f + Gα‖ + (M/2)(|α|ᵀε + ‖Dα‖²)`.
//!
//! Includes the conic standard form of the subproblem (for export and
//! cross-checking) and a smoothed Newton solver for small memories.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};
use crate::memory::MemorySnapshot;

#[derive(Debug, Clone)]
pub struct Type2Problem {
    pub grad: Vector,
    pub g: Matrix,
    pub d: Matrix,
    pub eps: Vector,
    pub m: f64,
}

impl Type2Problem {
    pub fn new(grad: Vector, g: Matrix, d: Matrix, eps: Vector, m: f64) -> Result<Self> {
        let k = d.ncols();
        if g.ncols() != k || eps.len() != k {
            return Err(Error::DimensionMismatch { expected: k, got: g.ncols().min(eps.len()) });
        }
        if g.nrows() != grad.len() || d.nrows() != grad.len() {
            return Err(Error::DimensionMismatch { expected: grad.len(), got: g.nrows() });
        }
        if eps.iter().any(|&e| !(e >= 0.0)) {
            return Err(Error::InvalidConfig("error vector must be nonnegative".into()));
        }
        if !(m > 0.0) {
            return Err(Error::InvalidConfig(format!("M must be positive, got {m}")));
        }
        Ok(Self { grad, g, d, eps, m })
    }

    pub fn from_snapshot(snap: &MemorySnapshot, grad: &Vector, m: f64) -> Result<Self> {
        Self::new(grad.clone(), snap.g.clone(), snap.d.clone(), snap.eps.clone(), m)
    }

    pub fn k(&self) -> usize {
        self.d.ncols()
    }

    pub fn objective(&self, alpha: &Vector) -> f64 {
        type2_objective(self, alpha)
    }
}

pub fn type2_objective(p: &Type2Problem, alpha: &Vector) -> f64 {
    let resid = &p.grad + &p.g * alpha;
    let l1: f64 = alpha.iter().zip(p.eps.iter()).map(|(a, e)| a.abs() * e).sum();
    resid.norm() + p.m / 2.0 * (l1 + (&p.d * alpha).norm_squared())
}

/// Distance from zero to the subdifferential of the Type-II objective at
/// `alpha`. Meaningful when `∇f + Gα ≠ 0`.
pub fn type2_subgradient_residual(p: &Type2Problem, alpha: &Vector) -> f64 {
    let s = &p.grad + &p.g * alpha;
    let sn = s.norm().max(1e-300);
    let smooth = p.g.tr_mul(&s) / sn + p.d.tr_mul(&(&p.d * alpha)) * p.m;
    let mut r = Vector::zeros(alpha.len());
    for i in 0..alpha.len() {
        let w = p.m / 2.0 * p.eps[i];
        r[i] = if alpha[i] != 0.0 {
            smooth[i] + w * alpha[i].signum()
        } else {
            (smooth[i].abs() - w).max(0.0)
        };
    }
    r.norm()
}

/// Conic standard form `A0·x + A1·[t1; ω1] + A2·[t2; ω2⁰; ω2] = b` with
/// `x = [α₊; α₋] ≥ 0`, objective `c0ᵀx + c1ᵀ[t1; ω1] + c2ᵀ[t2; ω2⁰; ω2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SocpStandardForm {
    pub c0: Vector,
    pub c1: Vector,
    pub c2: Vector,
    pub a0: Matrix,
    pub a1: Matrix,
    pub a2: Matrix,
    pub b: Vector,
}

/// A feasible point of the standard form.
#[derive(Debug, Clone, PartialEq)]
pub struct SocpPoint {
    pub x: Vector,
    pub cone1: Vector,
    pub cone2: Vector,
}

/// Thin SVD `U Σ Vᵀ` with columns of `U` zeroed where `σ ≈ 0`, so that `UUᵀ`
/// is the projector onto the range.
fn thin_svd(m: &Matrix) -> (Matrix, Vector, Matrix) {
    let k = m.ncols();
    let svd = m.clone().svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V");
    let s = svd.singular_values;
    let smax = s.iter().copied().fold(0.0, f64::max);
    for j in 0..s.len() {
        if !(s[j] > 1e-12 * smax) {
            u.column_mut(j).fill(0.0);
        }
    }
    // nalgebra returns min(d, k) singular triplets; pad to k.
    let r = s.len();
    if r < k {
        let u = u.resize_horizontally(k, 0.0);
        let s = s.resize_vertically(k, 0.0);
        let v_t = v_t.resize_vertically(k, 0.0);
        return (u, s, v_t);
    }
    (u, s, v_t)
}

pub fn build_socp(p: &Type2Problem) -> Result<SocpStandardForm> {
    let k = p.k();
    if k == 0 {
        return Err(Error::InvalidConfig("SOCP needs at least one memory column".into()));
    }
    let (ug, sg, vgt) = thin_svd(&p.g);
    let (_, sd, vdt) = thin_svd(&p.d);
    let sgvg = Matrix::from_diagonal(&sg) * &vgt;
    let sdvd = Matrix::from_diagonal(&sd) * &vdt;
    let rows = 2 * k + 2;
    let half_m = p.m / 2.0;
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;

    let mut c0 = Vector::zeros(2 * k);
    c0.rows_mut(0, k).copy_from(&(&p.eps * half_m));
    c0.rows_mut(k, k).copy_from(&(&p.eps * half_m));
    let mut c1 = Vector::zeros(k + 2);
    c1[0] = 1.0;
    let mut c2 = Vector::zeros(k + 2);
    c2[0] = p.m / (2.0 * std::f64::consts::SQRT_2);
    c2[1] = c2[0];

    let mut a0 = Matrix::zeros(rows, 2 * k);
    a0.view_mut((0, 0), (k, k)).copy_from(&(-&sgvg));
    a0.view_mut((0, k), (k, k)).copy_from(&sgvg);
    a0.view_mut((k + 2, 0), (k, k)).copy_from(&sdvd);
    a0.view_mut((k + 2, k), (k, k)).copy_from(&(-&sdvd));

    let mut a1 = Matrix::zeros(rows, k + 2);
    a1.view_mut((0, 1), (k + 1, k + 1)).fill_with_identity();

    let mut a2 = Matrix::zeros(rows, k + 2);
    a2[(k + 1, 0)] = -inv_sqrt2;
    a2[(k + 1, 1)] = inv_sqrt2;
    for i in 0..k {
        a2[(k + 2 + i, 2 + i)] = -1.0;
    }

    let utg = ug.tr_mul(&p.grad);
    let outside = (&p.grad - &ug * &utg).norm();
    let mut b = Vector::zeros(rows);
    b.rows_mut(0, k).copy_from(&utg);
    b[k] = outside;
    b[k + 1] = -0.5;

    Ok(SocpStandardForm { c0, c1, c2, a0, a1, a2, b })
}

impl SocpStandardForm {
    pub fn k(&self) -> usize {
        self.c0.len() / 2
    }

    /// Tight feasible point representing `alpha`.
    pub fn encode(&self, alpha: &Vector) -> SocpPoint {
        let k = self.k();
        let mut x = Vector::zeros(2 * k);
        for i in 0..k {
            x[i] = alpha[i].max(0.0);
            x[k + i] = (-alpha[i]).max(0.0);
        }
        // Row blocks of A0 applied to α give ω1's head and ω2.
        let a0x = &self.a0 * &x;
        let mut cone1 = Vector::zeros(k + 2);
        for i in 0..k {
            cone1[1 + i] = self.b[i] - a0x[i];
        }
        cone1[k + 1] = self.b[k];
        cone1[0] = cone1.rows(1, k + 1).norm();
        let omega2 = a0x.rows(k + 2, k).into_owned();
        let q = omega2.norm_squared();
        let sqrt2 = std::f64::consts::SQRT_2;
        let mut cone2 = Vector::zeros(k + 2);
        cone2[0] = (1.0 / sqrt2 + sqrt2 * q) / 2.0;
        cone2[1] = (sqrt2 * q - 1.0 / sqrt2) / 2.0;
        cone2.rows_mut(2, k).copy_from(&omega2);
        SocpPoint { x, cone1, cone2 }
    }

    pub fn evaluate(&self, pt: &SocpPoint) -> f64 {
        self.c0.dot(&pt.x) + self.c1.dot(&pt.cone1) + self.c2.dot(&pt.cone2)
    }

    /// `‖A0x + A1s1 + A2s2 − b‖`.
    pub fn residual(&self, pt: &SocpPoint) -> f64 {
        (&self.a0 * &pt.x + &self.a1 * &pt.cone1 + &self.a2 * &pt.cone2 - &self.b).norm()
    }

    /// Largest violation of the cone and sign constraints.
    pub fn cone_violation(&self, pt: &SocpPoint) -> f64 {
        let lorentz = |v: &Vector| (v.rows(1, v.len() - 1).norm() - v[0]).max(0.0);
        let neg = pt.x.iter().fold(0.0f64, |a, &v| a.max(-v));
        neg.max(lorentz(&pt.cone1)).max(lorentz(&pt.cone2))
    }

    /// Labeled row-major dump: a `label rows cols` header per block followed
    /// by one line per row.
    pub fn dump(&self, mut w: impl Write) -> io::Result<()> {
        let vectors = [("c0", &self.c0), ("c1", &self.c1), ("c2", &self.c2)];
        for (label, v) in vectors {
            writeln!(w, "{label} 1 {}", v.len())?;
            write_row(&mut w, v.iter())?;
        }
        for (label, m) in [("A0", &self.a0), ("A1", &self.a1), ("A2", &self.a2)] {
            writeln!(w, "{label} {} {}", m.nrows(), m.ncols())?;
            for row in m.row_iter() {
                write_row(&mut w, row.iter())?;
            }
        }
        writeln!(w, "b {} 1", self.b.len())?;
        for v in self.b.iter() {
            writeln!(w, "{v:e}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.dump(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("dump is ASCII")
    }
}

fn write_row<'a>(w: &mut impl Write, vals: impl Iterator<Item = &'a f64>) -> io::Result<()> {
    let line: Vec<String> = vals.map(|v| format!("{v:e}")).collect();
    writeln!(w, "{}", line.join(" "))
}

const SMOOTHING_LEVELS: [f64; 4] = [1e-2, 1e-4, 1e-6, 1e-8];
const NEWTON_STEPS_PER_LEVEL: usize = 50;
const MAX_INNER: usize = 500;
const MAX_SOLVER_K: usize = 25;

struct Smoothed<'a> {
    p: &'a Type2Problem,
    gram: Matrix,
    mu: f64,
}

impl Smoothed<'_> {
    fn huber(&self, a: f64) -> (f64, f64, f64) {
        if a.abs() <= self.mu {
            (a * a / (2.0 * self.mu), a / self.mu, 1.0 / self.mu)
        } else {
            (a.abs() - self.mu / 2.0, a.signum(), 0.0)
        }
    }

    fn value(&self, alpha: &Vector) -> f64 {
        let s = &self.p.grad + &self.p.g * alpha;
        let l1: f64 = alpha.iter().zip(self.p.eps.iter()).map(|(&a, e)| e * self.huber(a).0).sum();
        (s.norm_squared() + self.mu * self.mu).sqrt()
            + self.p.m / 2.0 * (l1 + alpha.dot(&(&self.gram * alpha)))
    }

    fn grad_hess(&self, alpha: &Vector) -> (Vector, Matrix) {
        let k = alpha.len();
        let s = &self.p.grad + &self.p.g * alpha;
        let q = (s.norm_squared() + self.mu * self.mu).sqrt();
        let gts = self.p.g.tr_mul(&s);
        let mut grad = &gts / q + &self.gram * alpha * self.p.m;
        let mut hess = self.p.g.tr_mul(&self.p.g) / q - (&gts * gts.transpose()) / q.powi(3)
            + &self.gram * self.p.m;
        for i in 0..k {
            let (_, dh, d2h) = self.huber(alpha[i]);
            let w = self.p.m / 2.0 * self.p.eps[i];
            grad[i] += w * dh;
            hess[(i, i)] += w * d2h;
        }
        (grad, hess)
    }
}

fn solve_psd(hess: &Matrix, rhs: &Vector) -> Option<Vector> {
    let k = hess.nrows();
    let scale = hess.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let mut shift = 0.0;
    for _ in 0..30 {
        let shifted = hess + Matrix::identity(k, k) * shift;
        if let Some(ch) = shifted.cholesky() {
            let x = ch.solve(rhs);
            if x.iter().all(|v| v.is_finite()) {
                return Some(x);
            }
        }
        shift = if shift == 0.0 { 1e-14 * scale } else { shift * 10.0 };
    }
    None
}

/// Active-set refinement of a smoothed solution: Newton on the support with
/// fixed signs, then re-admission of zero entries that violate optimality.
fn polish_active_set(p: &Type2Problem, gram: &Matrix, start: &Vector) -> Vector {
    let k = start.len();
    let w = &p.eps * (p.m / 2.0);
    let mut a = start.clone();
    let mut sign: Vec<f64> = a.iter().map(|&v| if v.abs() > 1e-6 { v.signum() } else { 0.0 }).collect();
    for i in 0..k {
        if sign[i] == 0.0 {
            a[i] = 0.0;
        }
    }
    let floor = 1e-14 * p.grad.norm();
    let smooth_grad = |a: &Vector| -> (Vector, Vector, f64) {
        let s = &p.grad + &p.g * a;
        let q = s.norm().max(floor);
        let gts = p.g.tr_mul(&s);
        (&gts / q + gram * a * p.m, gts, q)
    };
    let restricted = |a: &Vector, sign: &[f64]| -> f64 {
        let s = &p.grad + &p.g * a;
        let lin: f64 = (0..k).map(|i| w[i] * sign[i] * a[i]).sum();
        s.norm() + lin + p.m / 2.0 * a.dot(&(gram * a))
    };
    for _ in 0..4 * k + 4 {
        for _ in 0..30 {
            let support: Vec<usize> = (0..k).filter(|&i| sign[i] != 0.0).collect();
            if support.is_empty() {
                break;
            }
            let (sg, gts, q) = smooth_grad(&a);
            let hess = p.g.tr_mul(&p.g) / q - (&gts * gts.transpose()) / q.powi(3) + gram * p.m;
            let n = support.len();
            let grad_s = Vector::from_iterator(n, support.iter().map(|&i| sg[i] + w[i] * sign[i]));
            if grad_s.norm() <= 1e-15 * (1.0 + p.grad.norm()) {
                break;
            }
            let hess_s = Matrix::from_fn(n, n, |r, c| hess[(support[r], support[c])]);
            let dir_s = match solve_psd(&hess_s, &-&grad_s) {
                Some(d) if d.dot(&grad_s) < 0.0 => d,
                _ => -&grad_s,
            };
            // Largest step that keeps every sign.
            let mut tmax = 1.0f64;
            let mut blocking = None;
            for (r, &i) in support.iter().enumerate() {
                if dir_s[r] * sign[i] < 0.0 {
                    let t = -a[i] / dir_s[r];
                    if t < tmax {
                        tmax = t;
                        blocking = Some(i);
                    }
                }
            }
            let f0 = restricted(&a, &sign);
            let slope = dir_s.dot(&grad_s);
            let mut step = tmax;
            let mut moved = false;
            for _ in 0..60 {
                let mut trial = a.clone();
                for (r, &i) in support.iter().enumerate() {
                    trial[i] += step * dir_s[r];
                }
                if restricted(&trial, &sign) <= f0 + 1e-4 * step * slope {
                    a = trial;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
            if step == tmax {
                if let Some(i) = blocking {
                    a[i] = 0.0;
                    sign[i] = 0.0;
                }
            }
        }
        let (sg, _, _) = smooth_grad(&a);
        let violator = (0..k)
            .filter(|&i| sign[i] == 0.0 && sg[i].abs() > w[i] * (1.0 + 1e-12))
            .max_by(|&i, &j| (sg[i].abs() - w[i]).total_cmp(&(sg[j].abs() - w[j])));
        match violator {
            Some(i) => sign[i] = -sg[i].signum(),
            None => break,
        }
    }
    a
}

/// Minimizes the Type-II objective by smoothing and damped Newton.
///
/// The returned step never has a larger objective than `α = 0`.
pub fn solve_type2_small(p: &Type2Problem) -> Result<Vector> {
    let k = p.k();
    if k > MAX_SOLVER_K {
        return Err(Error::InvalidConfig(format!("type-II solver supports k <= {MAX_SOLVER_K}, got {k}")));
    }
    let zero = Vector::zeros(k);
    if k == 0 || p.grad.norm() == 0.0 {
        return Ok(zero);
    }
    let gram = p.d.tr_mul(&p.d);
    let mut alpha = zero.clone();
    let mut inner = 0;
    for &mu in &SMOOTHING_LEVELS {
        let sm = Smoothed { p, gram: gram.clone(), mu };
        for _ in 0..NEWTON_STEPS_PER_LEVEL {
            inner += 1;
            if inner > MAX_INNER {
                return Err(Error::NoConvergence);
            }
            let (grad, hess) = sm.grad_hess(&alpha);
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NoConvergence);
            }
            let gnorm = grad.norm();
            if gnorm <= 1e-14 * (1.0 + p.grad.norm()) {
                break;
            }
            let dir = match solve_psd(&hess, &-&grad) {
                Some(d) if d.dot(&grad) < 0.0 => d,
                _ => -&grad,
            };
            let f0 = sm.value(&alpha);
            let slope = dir.dot(&grad);
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = &alpha + &dir * step;
                let ft = sm.value(&trial);
                if ft <= f0 + 1e-4 * step * slope {
                    alpha = trial;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted || (&dir * step).norm() <= 1e-15 * (1.0 + alpha.norm()) {
                break;
            }
        }
    }
    if alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConvergence);
    }
    let polished = polish_active_set(p, &gram, &alpha);
    if type2_objective(p, &polished) <= type2_objective(p, &alpha) {
        alpha = polished;
    }
    if type2_objective(p, &alpha) > type2_objective(p, &zero) {
        return Ok(zero);
    }
    Ok(alpha)
}
