//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// All `k`-subsets of `0..m` in lexicographic order.
pub fn subsets(m: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            rec(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, m, k, &mut Vec::new(), &mut out);
    out
}

/// Exhaustive search: the `k`-row support whose least-squares fit leaves the
/// smallest residual.
pub fn best_support_ls(phi: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> Vec<usize> {
    let mut best = (f64::INFINITY, Vec::new());
    for s in subsets(phi.ncols(), k) {
        let sub = phi.select_columns(&s);
        let fit = sub.clone().svd(true, true).solve(y, 1e-12).expect("svd solve");
        let r = (y - &sub * fit).norm_squared();
        if r < best.0 {
            best = (r, s);
        }
    }
    best.1
}

/// Cyclic block coordinate descent for `min ‖Y − ΦX‖² + λ Σ w_i ‖X_i‖`.
pub fn cd_group_lasso(phi: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64, w: &[f64], sweeps: usize) -> DMatrix<f64> {
    let (m, l) = (phi.ncols(), y.ncols());
    let mut x = DMatrix::<f64>::zeros(m, l);
    let mut r = y.clone();
    let norms: Vec<f64> = (0..m).map(|i| phi.column(i).norm_squared()).collect();
    for _ in 0..sweeps {
        let mut change = 0.0f64;
        for i in 0..m {
            let old = x.row(i).clone_owned();
            // residual with row i removed
            let col = phi.column(i).clone_owned();
            r += &col * &old;
            let c = col.transpose() * &r;
            let cn = c.norm();
            let shrink = if cn > 0.0 { (1.0 - lambda * w[i] / (2.0 * cn)).max(0.0) } else { 0.0 };
            let new = c * (shrink / norms[i]);
            r -= &col * &new;
            change = change.max((&new - &old).amax());
            x.set_row(i, &new);
        }
        if change < 1e-15 {
            break;
        }
    }
    x
}

/// `Σ₀ = blockdiag(γ_i B)` on the vectorized model.
pub fn prior_cov(gamma: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(gamma).kronecker(b)
}

/// `D = Φ ⊗ I_L`, built entry by entry.
pub fn kron_explicit(phi: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    let (n, m) = phi.shape();
    let mut d = DMatrix::zeros(n * l, m * l);
    for a in 0..n {
        for i in 0..m {
            for t in 0..l {
                d[(a * l + t, i * l + t)] = phi[(a, i)];
            }
        }
    }
    d
}

/// `vec(Yᵀ)` by loops.
pub fn vec_rows(y: &DMatrix<f64>) -> DVector<f64> {
    let mut v = Vec::with_capacity(y.len());
    for i in 0..y.nrows() {
        for t in 0..y.ncols() {
            v.push(y[(i, t)]);
        }
    }
    DVector::from_vec(v)
}

/// Information form of the posterior mean, `(DᵀD/λ + Σ₀⁻¹)⁻¹ Dᵀy/λ`.
pub fn posterior_mean_info(d: &DMatrix<f64>, y: &DVector<f64>, sigma0: &DMatrix<f64>, lambda: f64) -> DVector<f64> {
    let p = d.tr_mul(d) / lambda + sigma0.clone().try_inverse().expect("invertible prior");
    p.cholesky().expect("pd precision").solve(&(d.tr_mul(y) / lambda))
}

pub fn random_matrix(rng: &mut impl rand::Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

/// Random symmetric positive definite matrix with eigenvalues in roughly [0.1, 2].
pub fn random_spd(rng: &mut impl rand::Rng, l: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, l, l);
    let mut s = &a * a.transpose() / l as f64;
    for k in 0..l {
        s[(k, k)] += 0.1;
    }
    s
}

pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}
