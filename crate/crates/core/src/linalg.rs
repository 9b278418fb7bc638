//! Small dense linear-algebra helpers shared by the solvers.
//!
//! Everything here works on `nalgebra::DMatrix<f64>` (column-major storage).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Jitter schedule for Cholesky retries, as multiples of `trace / n`.
const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// Cholesky factorization of a symmetric matrix that escalates a diagonal
/// jitter (`1e-12 * trace / n`, then x10 up to `1e-6 * trace / n`) before
/// giving up with [`Error::SingularSystem`].
pub fn cholesky_jitter(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    if let Some(ch) = checked_cholesky(a.clone()) {
        return Ok(ch);
    }
    let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter * scale;
        }
        if let Some(ch) = checked_cholesky(shifted) {
            return Ok(ch);
        }
        jitter *= 10.0;
    }
    Err(Error::SingularSystem { n })
}

fn checked_cholesky(a: DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    let ch = Cholesky::new(a)?;
    let diag = ch.l_dirty().diagonal();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for &d in diag.iter() {
        if !d.is_finite() {
            return None;
        }
        lo = lo.min(d.abs());
        hi = hi.max(d.abs());
    }
    // condition estimate from the factor's diagonal
    if lo == 0.0 || (hi / lo).powi(2) > 1.0 / f64::EPSILON {
        return None;
    }
    Some(ch)
}

/// log-determinant from a Cholesky factor.
pub fn chol_logdet(ch: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Symmetric eigendecomposition with eigenvalues in ascending order.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let (vals, _) = sym_eigen(a);
    vals[0]
}

/// Rebuild `V diag(f(values)) Vᵀ`.
pub fn spectral_map(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let mapped = DVector::from_iterator(vals.len(), vals.iter().map(|&v| f(v)));
    let mut out = &vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose();
    symmetrize(&mut out);
    out
}

/// Clamp the spectrum of a symmetric matrix from below.
pub fn floor_eigenvalues(a: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    spectral_map(a, |v| v.max(floor))
}

/// Rescale the spectrum of a symmetric matrix so the trace equals `trace`
/// while every eigenvalue stays at or above `floor`: `v_i = max(s·μ_i, floor)`
/// with `s` chosen to hit the trace. `None` when no positive scale exists.
pub fn floor_with_trace(a: &DMatrix<f64>, floor: f64, trace: f64) -> Option<DMatrix<f64>> {
    let (vals, vecs) = sym_eigen(a);
    let n = vals.len();
    // a hair above the floor so reconstruction rounding cannot dip below it
    let target = floor * (1.0 + 1e-8);
    if trace < n as f64 * target {
        return None;
    }
    let mut clamped = vec![false; n];
    let mut s = 0.0;
    for _ in 0..=n {
        let free: f64 = (0..n).filter(|&i| !clamped[i]).map(|i| vals[i]).sum();
        let fixed = clamped.iter().filter(|&&c| c).count() as f64 * target;
        if !(free > 0.0) {
            return None;
        }
        s = (trace - fixed) / free;
        let mut changed = false;
        for i in 0..n {
            if !clamped[i] && s * vals[i] < target {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mapped = DVector::from_fn(n, |i, _| if clamped[i] { target } else { s * vals[i] });
    let mut out = &vecs * DMatrix::from_diagonal(&mapped) * vecs.transpose();
    symmetrize(&mut out);
    Some(out)
}

/// Principal square root and inverse square root of a PD matrix.
pub fn sqrt_and_inv_sqrt(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (vals, vecs) = sym_eigen(a);
    let n = vals.len();
    let sq = DVector::from_iterator(n, vals.iter().map(|v| v.max(0.0).sqrt()));
    let isq = DVector::from_iterator(n, vals.iter().map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()));
    let root = &vecs * DMatrix::from_diagonal(&sq) * vecs.transpose();
    let inv_root = &vecs * DMatrix::from_diagonal(&isq) * vecs.transpose();
    (root, inv_root)
}

/// AR(1) correlation matrix `T(r)_{ab} = r^{|a-b|}`.
pub fn toeplitz_ar1(r: f64, l: usize) -> DMatrix<f64> {
    DMatrix::from_fn(l, l, |a, b| r.powi((a as i32 - b as i32).abs()))
}

/// Largest eigenvalue of `ΦᵀΦ` by power iteration on `Φ`.
pub fn power_iteration_gram(phi: &DMatrix<f64>, max_iters: usize, tol: f64) -> f64 {
    let m = phi.ncols();
    if m == 0 {
        return 0.0;
    }
    // deterministic start that is not orthogonal to the top singular vector in practice
    let mut v = DVector::from_fn(m, |i, _| 1.0 + 0.01 * (i as f64 + 1.0).sin());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..max_iters {
        let w = phi.tr_mul(&(phi * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - est).abs() <= tol * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    // Rayleigh quotient underestimates; a final norm bound keeps the step safe
    let w = phi.tr_mul(&(phi * &v));
    est.max(w.norm())
}

pub fn frob2(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}
