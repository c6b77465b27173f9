//! Dense kernels for the small blocks that appear in the subspace methods.
//!
//! Direction blocks are tall (`d × N` with `N ≪ d`), everything else is at
//! most `N × N`. Nothing here is tuned for large dense problems.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative residual below which a column counts as linearly dependent.
pub const RANK_TOL: f64 = 1e-12;
/// Relative singular-value cutoff for the condition number.
pub const SINGULAR_TOL: f64 = 1e-14;

/// Eigendecomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vector,
    pub eigenvectors: Matrix,
}

impl SymEig {
    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn reconstruct(&self) -> Matrix {
        &self.eigenvectors
            * Matrix::from_diagonal(&self.eigenvalues)
            * self.eigenvectors.transpose()
    }
}

fn ensure_finite(m: &Matrix, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Gram-Schmidt with one re-orthogonalization pass. Fails on the first
/// column that is (numerically) in the span of the previous ones.
pub fn qr_orthonormalize(a: &Matrix) -> Result<Matrix> {
    ensure_finite(a, "qr_orthonormalize")?;
    let mut q = Matrix::zeros(a.nrows(), a.ncols());
    for j in 0..a.ncols() {
        let col = orthogonalize_against(&q, j, &a.column(j).into_owned());
        match col {
            Some(c) => q.set_column(j, &c),
            None => return Err(Error::RankDeficient { column: j }),
        }
    }
    Ok(q)
}

/// Like [`qr_orthonormalize`] but skips dependent columns. Returns the
/// orthonormal block together with the indices of the columns that were kept.
pub fn qr_orthonormalize_independent(a: &Matrix) -> (Matrix, Vec<usize>) {
    let mut q = Matrix::zeros(a.nrows(), a.ncols());
    let mut kept = Vec::new();
    for j in 0..a.ncols() {
        let v = a.column(j).into_owned();
        if !v.iter().all(|x| x.is_finite()) {
            continue;
        }
        if let Some(c) = orthogonalize_against(&q, kept.len(), &v) {
            q.set_column(kept.len(), &c);
            kept.push(j);
        }
    }
    (q.columns(0, kept.len()).into_owned(), kept)
}

/// Orthogonalizes `v` against the first `k` columns of `q` and normalizes it.
fn orthogonalize_against(q: &Matrix, k: usize, v: &Vector) -> Option<Vector> {
    let norm0 = v.norm();
    if norm0 == 0.0 {
        return None;
    }
    let mut w = v.clone();
    for _ in 0..2 {
        for i in 0..k {
            let qi = q.column(i);
            let c = qi.dot(&w);
            w.axpy(-c, &qi, 1.0);
        }
    }
    let norm = w.norm();
    if norm < RANK_TOL * norm0 {
        return None;
    }
    Some(w / norm)
}

/// Symmetric eigendecomposition. The input is symmetrized first.
pub fn sym_eig(h: &Matrix) -> Result<SymEig> {
    ensure_finite(h, "sym_eig")?;
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(SymEig { eigenvalues, eigenvectors })
}

/// Singular values of a (tall) block, descending.
pub fn singular_values(d: &Matrix) -> Vector {
    if d.ncols() == 0 || d.nrows() == 0 {
        return Vector::zeros(0);
    }
    let mut s: Vec<f64> = d.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Vector::from_vec(s)
}

pub fn spectral_norm(m: &Matrix) -> f64 {
    singular_values(m).iter().copied().fold(0.0, f64::max)
}

/// `√(‖DᵀD‖‖(DᵀD)⁻¹‖)`, i.e. `σ_max/σ_min`. Returns `+∞` once the smallest
/// singular value drops below `1e-14·σ_max`.
pub fn condition_number(d: &Matrix) -> f64 {
    let s = singular_values(d);
    if s.is_empty() {
        return f64::INFINITY;
    }
    let smax = s[0];
    let smin = s[s.len() - 1];
    if smax == 0.0 || smin < SINGULAR_TOL * smax {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Orthogonal projection of `v` onto the column span of `d`.
pub fn project(d: &Matrix, v: &Vector) -> Result<Vector> {
    if d.nrows() != v.len() {
        return Err(Error::DimensionMismatch { expected: d.nrows(), got: v.len() });
    }
    let q = qr_orthonormalize(d)?;
    Ok(&q * (q.transpose() * v))
}

/// `(DᵀD)^{-1/2}` computed from the singular value decomposition of `D`.
///
/// Going through `D` rather than the Gram matrix keeps the relative accuracy
/// at `κ_D·ε` instead of `κ_D²·ε`.
pub fn inverse_sqrt_gram_from_columns(d: &Matrix) -> Result<Matrix> {
    ensure_finite(d, "inverse_sqrt_gram_from_columns")?;
    let k = d.ncols();
    let svd = d.clone().svd(false, true);
    let v_t = svd.v_t.ok_or(Error::NonFinite("svd"))?;
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if v_t.nrows() < k {
        return Err(Error::RankDeficient { column: v_t.nrows() });
    }
    let mut scaled = v_t.transpose();
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if !(s > SINGULAR_TOL * smax) {
            return Err(Error::RankDeficient { column: j });
        }
        scaled.column_mut(j).scale_mut(1.0 / s);
    }
    Ok(scaled * v_t)
}

/// `(DᵀD)^{-1/2}` computed from the Gram matrix alone.
pub fn inverse_sqrt_gram(gram: &Matrix) -> Result<Matrix> {
    let eig = sym_eig(gram)?;
    let lmax = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut scaled = eig.eigenvectors.clone();
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        if !(l > SINGULAR_TOL * SINGULAR_TOL * lmax) || l <= 0.0 {
            return Err(Error::RankDeficient { column: j });
        }
        scaled.column_mut(j).scale_mut(1.0 / l.sqrt());
    }
    Ok(scaled * eig.eigenvectors.transpose())
}

#[cfg(test)]
pub(crate) fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
