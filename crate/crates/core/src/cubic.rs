//! Type-I cubic model and its subproblem solver.
//!
//! The subproblem `min gᵀα + ½αᵀHα + (M/6)‖Dα‖³` is whitened with
//! `W = (DᵀD)^{-1/2}`, diagonalized as `WHW = VΛVᵀ`, and reduced to a scalar
//! equation in `r = ‖Dα‖` solved by bisection.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::memory::MemorySnapshot;

/// `(DᵀD)^{-1/2}`, or the identity when `D` is orthonormal by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum Whitening {
    Identity,
    Matrix(Matrix),
}

impl Whitening {
    fn apply(&self, v: &Vector) -> Vector {
        match self {
            Whitening::Identity => v.clone(),
            Whitening::Matrix(w) => w * v,
        }
    }

    fn sandwich(&self, h: &Matrix) -> Matrix {
        match self {
            Whitening::Identity => h.clone(),
            Whitening::Matrix(w) => w * h * w,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CubicModel {
    pub h: Matrix,
    pub g_proj: Vector,
    pub gram: Matrix,
    pub m: f64,
    pub whitening: Whitening,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub alpha: Vector,
    /// `‖Dα‖`.
    pub r: f64,
    pub model_value: f64,
}

/// `(GᵀD + DᵀG)/2`.
pub fn symmetric_part(d: &Matrix, g: &Matrix) -> Matrix {
    let dtg = d.tr_mul(g);
    (&dtg + dtg.transpose()) * 0.5
}

fn whitening_for(snap: &MemorySnapshot) -> Result<Whitening> {
    if snap.orthonormal {
        Ok(Whitening::Identity)
    } else {
        Ok(Whitening::Matrix(linalg::inverse_sqrt_gram_from_columns(&snap.d)?))
    }
}

/// `H = (GᵀD + DᵀG)/2 + I·M‖D‖‖ε‖/2`, with `g_proj = Dᵀ∇f(x)`.
pub fn build_h(snap: &MemorySnapshot, grad: &Vector, m: f64) -> Result<CubicModel> {
    let k = snap.k();
    let shift = m * snap.norm_d * snap.eps.norm() / 2.0;
    let h = symmetric_part(&snap.d, &snap.g) + Matrix::identity(k, k) * shift;
    Ok(CubicModel {
        h,
        g_proj: snap.d.tr_mul(grad),
        gram: snap.d.tr_mul(&snap.d),
        m,
        whitening: whitening_for(snap)?,
    })
}

impl CubicModel {
    /// Model built from explicit blocks. The whitening is computed from the
    /// Gram matrix.
    pub fn from_parts(h: Matrix, g_proj: Vector, gram: Matrix, m: f64) -> Result<Self> {
        let whitening = Whitening::Matrix(linalg::inverse_sqrt_gram(&gram)?);
        Ok(Self { h, g_proj, gram, m, whitening })
    }

    /// Same model with a different regularization parameter and Hessian
    /// block.
    pub fn with_h(&self, h: Matrix, m: f64) -> Self {
        Self { h, m, ..self.clone() }
    }

    pub fn k(&self) -> usize {
        self.g_proj.len()
    }

    pub fn dnorm(&self, alpha: &Vector) -> f64 {
        alpha.dot(&(&self.gram * alpha)).max(0.0).sqrt()
    }

    pub fn value(&self, alpha: &Vector) -> f64 {
        let r = self.dnorm(alpha);
        self.g_proj.dot(alpha) + 0.5 * alpha.dot(&(&self.h * alpha)) + self.m / 6.0 * r.powi(3)
    }

    /// `‖g + Hα + (M/2)‖Dα‖DᵀDα‖`.
    pub fn first_order_residual(&self, alpha: &Vector) -> f64 {
        let r = self.dnorm(alpha);
        (&self.g_proj + &self.h * alpha + (&self.gram * alpha) * (self.m * r / 2.0)).norm()
    }

    /// Smallest eigenvalue of `H + (M r/2)·DᵀD`.
    pub fn second_order_margin(&self, r: f64) -> Result<f64> {
        Ok(linalg::sym_eig(&(&self.h + &self.gram * (self.m * r / 2.0)))?.min_eigenvalue())
    }
}

/// Pairs `(r, ‖α̃(r)‖)` visited while bracketing and bisecting.
pub type BisectionTrace = Vec<(f64, f64)>;

const BISECTION_TOL: f64 = 1e-15;
const MAX_BISECTIONS: usize = 400;
const MAX_BRACKET_DOUBLINGS: usize = 2000;

pub fn solve_cubic_subproblem(model: &CubicModel) -> Result<SubproblemSolution> {
    solve_cubic_subproblem_traced(model).map(|(s, _)| s)
}

pub fn solve_cubic_subproblem_traced(
    model: &CubicModel,
) -> Result<(SubproblemSolution, BisectionTrace)> {
    let k = model.k();
    let m = model.m;
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::NonFinite("regularization parameter"));
    }
    let mut trace = BisectionTrace::new();
    if k == 0 {
        let sol = SubproblemSolution { alpha: Vector::zeros(0), r: 0.0, model_value: 0.0 };
        return Ok((sol, trace));
    }
    let eig = linalg::sym_eig(&model.whitening.sandwich(&model.h))?;
    let lam = &eig.eigenvalues;
    let v = &eig.eigenvectors;
    let c = v.tr_mul(&model.whitening.apply(&model.g_proj));
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("projected gradient"));
    }
    let lam_min = lam[0];
    let r_min = (-2.0 * lam_min / m).max(0.0);
    let cnorm = c.norm();

    let alpha_tilde = |r: f64| -> Vector {
        Vector::from_iterator(k, (0..k).map(|i| -c[i] / (lam[i] + m * r / 2.0)))
    };

    // Hard case: no gradient mass on the directions that become singular at
    // r_min, and the pseudo-inverse step is too short to reach r_min.
    let flat_tol = 1e-12 * lam.iter().fold(m * r_min, |a, &l| a.max(l.abs())).max(1e-300);
    let flat: Vec<usize> = (0..k).filter(|&i| lam[i] + m * r_min / 2.0 <= flat_tol).collect();
    // Numerically hard: the secular function is already below r just past
    // r_min, so the root sits at r_min to working precision.
    let probe = r_min * (1.0 + 1e-12);
    let unreachable = r_min > 0.0 && alpha_tilde(probe).norm() <= probe;
    let hard_candidate = !flat.is_empty()
        && (unreachable || flat.iter().all(|&i| c[i].abs() <= 1e-14 * cnorm.max(1e-300)));
    let at = if cnorm == 0.0 && r_min == 0.0 {
        Some(Vector::zeros(k))
    } else if hard_candidate {
        let mut pinv = Vector::zeros(k);
        for i in 0..k {
            if !flat.contains(&i) {
                pinv[i] = -c[i] / (lam[i] + m * r_min / 2.0);
            }
        }
        let pnorm = pinv.norm();
        trace.push((r_min, pnorm));
        if pnorm <= r_min {
            // Follow −c on the lowest eigenvector; positive when c vanishes.
            let sign = if c[flat[0]] > 0.0 { -1.0 } else { 1.0 };
            pinv[flat[0]] += sign * (r_min * r_min - pnorm * pnorm).max(0.0).sqrt();
            Some(pinv)
        } else {
            None
        }
    } else {
        None
    };

    let at = match at {
        Some(a) => a,
        None => {
            let mut hi = (2.0 * r_min).max(1.0);
            let mut doublings = 0;
            loop {
                let n = alpha_tilde(hi).norm();
                trace.push((hi, n));
                if !n.is_finite() {
                    return Err(Error::NonFinite("cubic subproblem bracket"));
                }
                if n < hi {
                    break;
                }
                hi *= 2.0;
                doublings += 1;
                if doublings > MAX_BRACKET_DOUBLINGS || !hi.is_finite() {
                    return Err(Error::NonFinite("cubic subproblem bracket"));
                }
            }
            let mut lo = r_min;
            let mut r = 0.5 * (lo + hi);
            for _ in 0..MAX_BISECTIONS {
                r = 0.5 * (lo + hi);
                let n = alpha_tilde(r).norm();
                trace.push((r, n));
                if (r - n).abs() <= BISECTION_TOL * r.max(1.0) || hi - lo <= f64::EPSILON * hi {
                    break;
                }
                if n > r {
                    lo = r;
                } else {
                    hi = r;
                }
            }
            let mut at = alpha_tilde(r);
            if (r - at.norm()).abs() > BISECTION_TOL * r.max(1.0) {
                // The root is not representable: the lowest component jumps
                // across it between adjacent floats. Fix its length instead.
                let rest = at.rows(1, k - 1).norm();
                if rest < r {
                    let sign = if c[0] > 0.0 { -1.0 } else { 1.0 };
                    at[0] = sign * (r * r - rest * rest).sqrt();
                }
            }
            at
        }
    };
    let mut alpha = model.whitening.apply(&(v * &at));
    if alpha.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cubic subproblem solution"));
    }
    refine(model, lam, v, at, &mut alpha);
    let r = model.dnorm(&alpha);
    let model_value = model.value(&alpha);
    Ok((SubproblemSolution { alpha, r, model_value }, trace))
}

const REFINEMENT_STEPS: usize = 3;

/// Newton refinement of the stationarity condition in eigen-coordinates of
/// the whitened problem, using the existing factorization. Recovers accuracy
/// lost to an ill-conditioned whitening. Skipped in the hard case.
fn refine(model: &CubicModel, lam: &Vector, v: &Matrix, mut at: Vector, alpha: &mut Vector) {
    let m = model.m;
    let mut resid = model.first_order_residual(alpha);
    for _ in 0..REFINEMENT_STEPS {
        let r = model.dnorm(alpha);
        if resid == 0.0 || r == 0.0 {
            return;
        }
        let diag = lam.map(|l| l + m * r / 2.0);
        let dmax = diag.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
        if diag.iter().any(|&x| x <= 1e-12 * dmax) {
            return;
        }
        let f = &model.g_proj + &model.h * &*alpha + (&model.gram * &*alpha) * (m * r / 2.0);
        let fhat = v.tr_mul(&model.whitening.apply(&f));
        // (diag + s·atatᵀ)⁻¹ by Sherman–Morrison with s = M/(2r).
        let s = m / (2.0 * r);
        let dinv_f = fhat.component_div(&diag);
        let dinv_a = at.component_div(&diag);
        let coef = s * at.dot(&dinv_f) / (1.0 + s * at.dot(&dinv_a));
        let delta = -(dinv_f - dinv_a * coef);
        let next_at = &at + delta;
        let next_alpha = model.whitening.apply(&(v * &next_at));
        let next_resid = model.first_order_residual(&next_alpha);
        if !(next_resid < resid) {
            return;
        }
        at = next_at;
        *alpha = next_alpha;
        resid = next_resid;
    }
}

/// Minimizer of `φ(v) = l0 + l1ᵀv + (λ₁/2)‖v−x₀‖² + (λ₂/6)‖v−x₀‖³`.
///
/// When both weights vanish the minimizer is taken to be `x₀`.
pub fn minimize_estimate_phi(
    l0: f64,
    l1: &Vector,
    lambda1: f64,
    lambda2: f64,
    x0: &Vector,
) -> (Vector, f64, f64) {
    let n1 = l1.norm();
    let r = if n1 == 0.0 || (lambda1 == 0.0 && lambda2 == 0.0) {
        0.0
    } else if lambda2 == 0.0 {
        n1 / lambda1
    } else {
        (-lambda1 + (lambda1 * lambda1 + 2.0 * lambda2 * n1).sqrt()) / lambda2
    };
    let v = if n1 == 0.0 { x0.clone() } else { x0 - l1 * (r / n1) };
    let phi = estimate_phi(l0, l1, lambda1, lambda2, x0, &v);
    (v, r, phi)
}

pub fn estimate_phi(l0: f64, l1: &Vector, lambda1: f64, lambda2: f64, x0: &Vector, v: &Vector) -> f64 {
    let dist = (v - x0).norm();
    l0 + l1.dot(v) + lambda1 / 2.0 * dist * dist + lambda2 / 6.0 * dist.powi(3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_model(h: f64, g: f64, m: f64) -> CubicModel {
        CubicModel {
            h: Matrix::from_element(1, 1, h),
            g_proj: Vector::from_element(1, g),
            gram: Matrix::identity(1, 1),
            m,
            whitening: Whitening::Identity,
        }
    }

    #[test]
    fn build_h_scalar() {
        let snap = MemorySnapshot {
            d: Matrix::from_element(1, 1, 1.0),
            g: Matrix::from_element(1, 1, 2.0),
            eps: Vector::from_element(1, 0.5),
            norm_d: 1.0,
            kappa_d: 1.0,
            orthonormal: true,
        };
        let model = build_h(&snap, &Vector::from_element(1, 1.0), 4.0).unwrap();
        assert_eq!(model.h[(0, 0)], 3.0);
        assert_eq!(model.g_proj[0], 1.0);
    }

    #[test]
    fn build_h_without_error_is_dtg() {
        let d = Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let a = Matrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 1.0]);
        let g = &a * &d;
        let snap = MemorySnapshot {
            d: d.clone(),
            g: g.clone(),
            eps: Vector::zeros(2),
            norm_d: 1.0,
            kappa_d: 1.0,
            orthonormal: true,
        };
        let model = build_h(&snap, &Vector::zeros(3), 1.0).unwrap();
        assert!((model.h - d.tr_mul(&g)).norm() < 1e-15);
    }

    #[test]
    fn newton_limit() {
        let h = Matrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let g = Vector::from_vec(vec![1.0, -2.0]);
        let model = CubicModel::from_parts(h.clone(), g.clone(), Matrix::identity(2, 2), 1e-16).unwrap();
        let sol = solve_cubic_subproblem(&model).unwrap();
        let newton = -h.lu().solve(&g).unwrap();
        assert!((sol.alpha - newton).norm() < 1e-8);
    }

    #[test]
    fn scalar_closed_form() {
        let sol = solve_cubic_subproblem(&scalar_model(1.0, -3.0, 2.0)).unwrap();
        let expected = (-1.0 + 13f64.sqrt()) / 2.0;
        assert!((sol.r - expected).abs() < 1e-9);
        assert!((sol.alpha[0] - expected).abs() < 1e-9);
        // 1-D grid cross-check at 1e-5 resolution.
        let model = scalar_model(1.0, -3.0, 2.0);
        let best = (0..=400_000)
            .map(|i| -2.0 + i as f64 * 1e-5)
            .min_by(|a, b| {
                let va = model.value(&Vector::from_element(1, *a));
                let vb = model.value(&Vector::from_element(1, *b));
                va.total_cmp(&vb)
            })
            .unwrap();
        assert!((best - expected).abs() < 2e-5);
    }

    #[test]
    fn hard_case_tie_break() {
        let sol = solve_cubic_subproblem(&scalar_model(-1.0, 0.0, 6.0)).unwrap();
        assert!((sol.r - 1.0 / 3.0).abs() < 1e-12);
        assert!((sol.alpha[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((sol.model_value + 1.0 / 54.0).abs() < 1e-12);
    }

    #[test]
    fn hard_case_with_partial_gradient() {
        let model = CubicModel::from_parts(
            Matrix::from_diagonal(&Vector::from_vec(vec![-2.0, 1.0])),
            Vector::from_vec(vec![0.0, 0.1]),
            Matrix::identity(2, 2),
            1.0,
        )
        .unwrap();
        let sol = solve_cubic_subproblem(&model).unwrap();
        assert!((sol.r - 4.0).abs() < 1e-9);
        assert!(sol.alpha[0] > 0.0);
        assert!(model.first_order_residual(&sol.alpha) < 1e-9);
        assert!(model.second_order_margin(sol.r).unwrap() > -1e-8);
    }

    #[test]
    fn zero_gradient_convex_gives_zero_step() {
        let model = scalar_model(2.0, 0.0, 1.0);
        let sol = solve_cubic_subproblem(&model).unwrap();
        assert_eq!(sol.alpha[0], 0.0);
        assert_eq!(sol.model_value, 0.0);
    }

    #[test]
    fn non_orthonormal_gram() {
        let gram = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let h = Matrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.3, 0.5]);
        let g = Vector::from_vec(vec![0.7, -0.2]);
        let model = CubicModel::from_parts(h, g, gram, 3.0).unwrap();
        let sol = solve_cubic_subproblem(&model).unwrap();
        assert!(model.first_order_residual(&sol.alpha) < 1e-8);
        assert!(model.second_order_margin(sol.r).unwrap() > -1e-8);
    }

    #[test]
    fn invalid_m_is_rejected() {
        assert!(matches!(
            solve_cubic_subproblem(&scalar_model(1.0, 1.0, 0.0)),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn phi_cases() {
        let x0 = Vector::from_vec(vec![1.0, 1.0]);
        let l1 = Vector::from_vec(vec![0.0, 4.0]);
        let (v, r, _) = minimize_estimate_phi(0.0, &l1, 0.0, 0.0, &x0);
        assert_eq!(r, 0.0);
        assert_eq!(v, x0);
        let (v, r, _) = minimize_estimate_phi(0.0, &l1, 2.0, 0.0, &x0);
        assert_eq!(r, 2.0);
        assert_eq!(v.as_slice(), &[1.0, -1.0]);
        let (_, r, _) = minimize_estimate_phi(0.0, &l1, 0.0, 2.0, &x0);
        assert!((r - 2.0).abs() < 1e-15);
        let (v, r, phi) = minimize_estimate_phi(3.0, &Vector::zeros(2), 1.0, 1.0, &x0);
        assert_eq!((r, phi), (0.0, 3.0));
        assert_eq!(v, x0);
    }

    #[test]
    fn phi_matches_golden_section() {
        for &(l1n, lam1, lam2) in &[(4.0, 0.0, 2.0), (1.0, 0.5, 3.0), (2.5, 1.5, 0.1)] {
            let f = |r: f64| -l1n * r + lam1 / 2.0 * r * r + lam2 / 6.0 * r.powi(3);
            let (mut a, mut b) = (0.0, 100.0);
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..200 {
                let c = b - phi * (b - a);
                let d = a + phi * (b - a);
                if f(c) < f(d) { b = d } else { a = c }
            }
            let l1 = Vector::from_vec(vec![l1n, 0.0]);
            let (_, r, _) = minimize_estimate_phi(0.0, &l1, lam1, lam2, &Vector::zeros(2));
            assert!((r - 0.5 * (a + b)).abs() < 1e-6, "{r} vs {}", 0.5 * (a + b));
        }
    }

    fn random_model(k: usize, vals: &[f64], m: f64) -> CubicModel {
        let h = Matrix::from_fn(k, k, |i, j| vals[i.min(j) * k + i.max(j)]);
        let g = Vector::from_fn(k, |i, _| vals[k * k + i]);
        let dcols = Matrix::from_fn(k + 1, k, |i, j| vals[k * k + k + i * k + j] + if i == j { 2.0 } else { 0.0 });
        let gram = dcols.tr_mul(&dcols);
        CubicModel::from_parts(h, g, gram, m).unwrap()
    }

    proptest! {
        #[test]
        fn certificates_hold(
            k in 1usize..6,
            vals in proptest::collection::vec(-3.0f64..3.0, 80),
            m in 0.01f64..50.0,
        ) {
            let model = random_model(k, &vals, m);
            let (sol, trace) = solve_cubic_subproblem_traced(&model).unwrap();
            let scale = model.g_proj.norm().max(1.0);
            prop_assert!(model.first_order_residual(&sol.alpha) <= 1e-6 * scale);
            prop_assert!(model.second_order_margin(sol.r).unwrap() >= -1e-8);
            prop_assert!((model.dnorm(&sol.alpha) - sol.r).abs() <= 1e-8 * sol.r.max(1.0));
            prop_assert!(sol.model_value <= 1e-12);
            // ‖α̃(r)‖ is nonincreasing in r along the visited points.
            let mut pts = trace.clone();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pts.windows(2) {
                prop_assert!(w[1].1 <= w[0].1 * (1.0 + 1e-12) + 1e-300);
            }
        }
    }
}
