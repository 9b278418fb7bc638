//! Problem and solution types, the MMV to block-sparse vectorization, the
//! Gaussian posterior shared by every Bayesian solver, and recovery metrics.
//!
//! Row `i` of `X` (length `L`) is block `i` of the stacked vector
//! `x = vec(Xᵀ)`; the lifted dictionary is `D = Φ ⊗ I_L`. Indices are 0-based.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_jitter, symmetrize};

/// Largest `M·L` for which the lifted dictionary is also kept as a dense matrix.
pub const DENSE_CAP: usize = 4096;

/// An MMV instance `Y = ΦX + V`.
#[derive(Debug, Clone, PartialEq)]
pub struct MmvProblem {
    pub phi: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// Noise variance / regularization weight. Zero means noiseless.
    pub lambda: f64,
}

impl MmvProblem {
    pub fn new(phi: DMatrix<f64>, y: DMatrix<f64>, lambda: f64) -> Result<Self> {
        let (n, m) = phi.shape();
        if n == 0 || m == 0 || y.ncols() == 0 {
            return Err(Error::InvalidProblem("empty dimension".into()));
        }
        if y.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "phi has {n} rows but y has {}",
                y.nrows()
            )));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidProblem(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        if let Some(j) = (0..m).find(|&j| phi.column(j).iter().all(|&v| v == 0.0)) {
            return Err(Error::InvalidProblem(format!("dictionary column {j} is all zero")));
        }
        if phi.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("non-finite entry".into()));
        }
        Ok(Self { phi, y, lambda })
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    pub fn m(&self) -> usize {
        self.phi.ncols()
    }

    pub fn l(&self) -> usize {
        self.y.ncols()
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self { phi: self.phi.clone(), y: self.y.clone(), lambda }
    }
}

/// SBL parameter state: row variances `γ`, shared row correlation `B`, noise `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub gamma: DVector<f64>,
    pub b: DMatrix<f64>,
    pub lambda: f64,
}

impl Hyperparams {
    pub fn new(gamma: DVector<f64>, b: DMatrix<f64>, lambda: f64) -> Self {
        Self { gamma, b, lambda }
    }

    /// `γ = 1`, `B = I`.
    pub fn uniform(m: usize, l: usize, lambda: f64) -> Self {
        Self { gamma: DVector::from_element(m, 1.0), b: DMatrix::identity(l, l), lambda }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolutionEstimate {
    /// Recovered `X̂` (M×L).
    pub x: DMatrix<f64>,
    pub hyper: Hyperparams,
    /// Sorted row indices judged nonzero.
    pub support: Vec<usize>,
    pub cost_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// `vec(Yᵀ)`: row-major flattening, row 0 first.
pub fn vectorize(y: &DMatrix<f64>) -> DVector<f64> {
    let (n, l) = y.shape();
    DVector::from_fn(n * l, |k, _| y[(k / l, k % l)])
}

/// Inverse of [`vectorize`] for blocks of length `l`.
pub fn devectorize(v: &DVector<f64>, l: usize) -> DMatrix<f64> {
    assert!(l > 0 && v.len() % l == 0, "length {} is not a multiple of {l}", v.len());
    DMatrix::from_fn(v.len() / l, l, |i, t| v[i * l + t])
}

/// The lifted dictionary `D = Φ ⊗ I_L` as an operator.
#[derive(Debug, Clone)]
pub struct KronDictionary {
    phi: DMatrix<f64>,
    block_len: usize,
    dense: Option<DMatrix<f64>>,
}

pub fn kron_dictionary(phi: &DMatrix<f64>, l: usize) -> KronDictionary {
    KronDictionary::with_cap(phi, l, DENSE_CAP)
}

impl KronDictionary {
    pub fn with_cap(phi: &DMatrix<f64>, l: usize, cap: usize) -> Self {
        assert!(l >= 1, "block length must be >= 1");
        let dense = (phi.ncols() * l <= cap).then(|| phi.kronecker(&DMatrix::identity(l, l)));
        Self { phi: phi.clone(), block_len: l, dense }
    }

    /// `(N·L, M·L)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.phi.nrows() * self.block_len, self.phi.ncols() * self.block_len)
    }

    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn dense(&self) -> Option<&DMatrix<f64>> {
        self.dense.as_ref()
    }

    /// `D x`, computed as `vec((Φ·mat(x))ᵀ)`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.shape().1);
        vectorize(&(&self.phi * devectorize(x, self.block_len)))
    }

    /// `Dᵀ y`, computed as `vec((Φᵀ·mat(y))ᵀ)`.
    pub fn apply_t(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.shape().0);
        vectorize(&self.phi.tr_mul(&devectorize(y, self.block_len)))
    }

    /// The `NL × L` column block `Φ_i ⊗ I_L`.
    pub fn block_columns(&self, i: usize) -> DMatrix<f64> {
        let (n, l) = (self.phi.nrows(), self.block_len);
        let mut out = DMatrix::zeros(n * l, l);
        for a in 0..n {
            for t in 0..l {
                out[(a * l + t, t)] = self.phi[(a, i)];
            }
        }
        out
    }
}

/// The vectorized block-sparse model `y = Dx + v`.
#[derive(Debug, Clone)]
pub struct BlockSparseView {
    pub d: KronDictionary,
    pub y_vec: DVector<f64>,
    pub block_len: usize,
}

impl BlockSparseView {
    pub fn from_problem(problem: &MmvProblem) -> Self {
        let l = problem.l();
        Self { d: kron_dictionary(&problem.phi, l), y_vec: vectorize(&problem.y), block_len: l }
    }

    pub fn n_blocks(&self) -> usize {
        self.d.phi().ncols()
    }
}

/// Posterior of the block-sparse model under the prior `N(0, Σ₀)`,
/// `Σ₀ = blockdiag(γ_i B)`. Only the diagonal `L×L` blocks of `Σ_x` are kept.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub x: DVector<f64>,
    pub sigma_blocks: Vec<DMatrix<f64>>,
}

impl Posterior {
    pub fn x_mat(&self, l: usize) -> DMatrix<f64> {
        devectorize(&self.x, l)
    }
}

/// `λI + DΣ₀Dᵀ = λI + (ΦΓΦᵀ) ⊗ B`.
pub(crate) fn marginal_covariance(phi: &DMatrix<f64>, hyper: &Hyperparams) -> DMatrix<f64> {
    let n = phi.nrows();
    let mut a = DMatrix::zeros(n, n);
    for (i, &g) in hyper.gamma.iter().enumerate() {
        if g > 0.0 {
            let col = phi.column(i);
            a.ger(g, &col, &col, 1.0);
        }
    }
    let mut cov = a.kronecker(&hyper.b);
    for k in 0..cov.nrows() {
        cov[(k, k)] += hyper.lambda;
    }
    symmetrize(&mut cov);
    cov
}

/// Posterior mean and diagonal covariance blocks via a Cholesky solve of the
/// `NL × NL` marginal covariance.
pub fn posterior_mean_cov(view: &BlockSparseView, hyper: &Hyperparams) -> Result<Posterior> {
    let l = view.block_len;
    let m = view.n_blocks();
    check_hyper(hyper, m, l)?;
    let cov = marginal_covariance(view.d.phi(), hyper);
    let chol = cholesky_jitter(&cov)?;
    let z = chol.solve(&view.y_vec);
    let u = view.d.apply_t(&z);
    let lower = chol.l();

    let mut x = DVector::zeros(m * l);
    let mut sigma_blocks = Vec::with_capacity(m);
    for i in 0..m {
        let g = hyper.gamma[i];
        if g <= 0.0 {
            sigma_blocks.push(DMatrix::zeros(l, l));
            continue;
        }
        let xi = &hyper.b * u.rows(i * l, l) * g;
        x.rows_mut(i * l, l).copy_from(&xi);

        // Q_i = (Φ_i ⊗ I)ᵀ Σ_y⁻¹ (Φ_i ⊗ I) through the triangular factor
        let mut gi = view.d.block_columns(i);
        lower.solve_lower_triangular_mut(&mut gi);
        let q = gi.tr_mul(&gi);
        let bq_b = &hyper.b * q * &hyper.b;
        let mut s = &hyper.b * g - bq_b * (g * g);
        symmetrize(&mut s);
        sigma_blocks.push(s);
    }
    Ok(Posterior { x, sigma_blocks })
}

fn check_hyper(hyper: &Hyperparams, m: usize, l: usize) -> Result<()> {
    if hyper.gamma.len() != m || hyper.b.shape() != (l, l) {
        return Err(Error::DimensionMismatch(format!(
            "hyperparameters ({} gammas, B {:?}) do not match M = {m}, L = {l}",
            hyper.gamma.len(),
            hyper.b.shape()
        )));
    }
    if hyper.gamma.iter().any(|&g| !(g >= 0.0)) {
        return Err(Error::InvalidProblem("negative or NaN gamma".into()));
    }
    if !(hyper.lambda > 0.0) {
        return Err(Error::InvalidProblem("lambda must be > 0 for the posterior".into()));
    }
    Ok(())
}

/// Type-II likelihood cost `log|Σ_y| + yᵀ Σ_y⁻¹ y` with `Σ_y = λI + DΣ₀Dᵀ`.
pub fn ml_cost(view: &BlockSparseView, hyper: &Hyperparams) -> Result<f64> {
    check_hyper(hyper, view.n_blocks(), view.block_len)?;
    let cov = marginal_covariance(view.d.phi(), hyper);
    let chol = cholesky_jitter(&cov)?;
    let z = chol.solve(&view.y_vec);
    Ok(chol_logdet(&chol) + view.y_vec.dot(&z))
}

/// Row energies `‖X_i·‖₂`.
pub fn row_norms(x: &DMatrix<f64>) -> Vec<f64> {
    x.row_iter().map(|r| r.norm()).collect()
}

/// `{ i : ‖X̂_i‖ > tau_rel · max_j ‖X̂_j‖ }`, empty for `X̂ = 0`.
pub fn extract_support(x: &DMatrix<f64>, tau_rel: f64) -> Vec<usize> {
    let norms = row_norms(x);
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Vec::new();
    }
    norms.iter().enumerate().filter(|(_, &v)| v > tau_rel * max).map(|(i, _)| i).collect()
}

/// `‖X̂ − X‖_F² / ‖X‖_F²`.
pub fn nmse(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Result<f64> {
    if x_hat.shape() != x_true.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", x_hat.shape(), x_true.shape())));
    }
    let den = x_true.norm_squared();
    if den == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok((x_hat - x_true).norm_squared() / den)
}

/// What counts as a failed trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRule {
    pub tau_rel: f64,
    pub nmse_tol: f64,
}

impl FailureRule {
    pub const NOISELESS: FailureRule = FailureRule { tau_rel: 1e-2, nmse_tol: 1e-3 };
    pub const NOISY: FailureRule = FailureRule { tau_rel: 1e-2, nmse_tol: 1e-1 };
}

impl Default for FailureRule {
    fn default() -> Self {
        Self::NOISELESS
    }
}

/// Support mismatch or NMSE above tolerance. A zero reference with a nonzero
/// estimate counts as failure.
pub fn trial_failure(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>, rule: FailureRule) -> bool {
    let truth = extract_support(x_true, f64::MIN_POSITIVE);
    if extract_support(x_hat, rule.tau_rel) != truth {
        return true;
    }
    match nmse(x_hat, x_true) {
        Ok(e) => !(e <= rule.nmse_tol),
        Err(Error::DegenerateReference) => x_hat.iter().any(|&v| v != 0.0),
        Err(_) => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn vectorize_examples() {
        let y = mat(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vectorize(&y).as_slice(), &[1.0, 2.0, 3.0, 4.0]);
        let z = vectorize(&DMatrix::zeros(25, 4));
        assert_eq!(z.len(), 100);
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kron_small_dense() {
        let d = kron_dictionary(&mat(1, 2, &[1.0, 2.0]), 2);
        let want = mat(2, 4, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
        assert_eq!(d.dense().unwrap(), &want);
    }

    #[test]
    fn kron_shape_fig1() {
        let phi = DMatrix::from_element(25, 125, 1.0);
        let d = kron_dictionary(&phi, 4);
        assert_eq!(d.shape(), (100, 500));
        assert!(d.dense().is_some());
        let big = KronDictionary::with_cap(&phi, 4, 100);
        assert!(big.dense().is_none());
    }

    #[test]
    fn posterior_zero_prior() {
        let p = MmvProblem::new(mat(2, 3, &[1.0, 0.5, 0.0, 0.0, 1.0, 2.0]), mat(2, 2, &[1.0, 2.0, 3.0, 4.0]), 0.1)
            .unwrap();
        let view = BlockSparseView::from_problem(&p);
        let hyper = Hyperparams::new(DVector::zeros(3), DMatrix::identity(2, 2), 0.1);
        let post = posterior_mean_cov(&view, &hyper).unwrap();
        assert!(post.x.iter().all(|&v| v == 0.0));
        assert!(post.sigma_blocks.iter().all(|s| s.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn posterior_scalar() {
        let p = MmvProblem::new(mat(1, 1, &[1.0]), mat(1, 1, &[2.0]), 1.0).unwrap();
        let view = BlockSparseView::from_problem(&p);
        let hyper = Hyperparams::uniform(1, 1, 1.0);
        let post = posterior_mean_cov(&view, &hyper).unwrap();
        assert!((post.x[0] - 1.0).abs() < 1e-15);
        assert!((post.sigma_blocks[0][(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ml_cost_examples() {
        let p = MmvProblem::new(mat(1, 1, &[1.0]), mat(1, 1, &[2.0]), 1.0).unwrap();
        let view = BlockSparseView::from_problem(&p);
        let c = ml_cost(&view, &Hyperparams::uniform(1, 1, 1.0)).unwrap();
        assert!((c - (2f64.ln() + 2.0)).abs() < 1e-14);

        let p = MmvProblem::new(mat(2, 3, &[1.0, 0.5, 0.2, 0.3, 1.0, 2.0]), mat(2, 2, &[1.0, 2.0, 3.0, 4.0]), 0.3)
            .unwrap();
        let view = BlockSparseView::from_problem(&p);
        let hyper = Hyperparams::new(DVector::zeros(3), DMatrix::identity(2, 2), 0.3);
        let c = ml_cost(&view, &hyper).unwrap();
        let want = 4.0 * 0.3f64.ln() + 30.0 / 0.3;
        assert!((c - want).abs() < 1e-12);
    }

    #[test]
    fn support_examples() {
        assert!(extract_support(&DMatrix::zeros(4, 2), 0.01).is_empty());
        let x = mat(3, 1, &[10.0, 0.001, 9.0]);
        assert_eq!(extract_support(&x, 0.01), vec![0, 2]);
    }

    #[test]
    fn nmse_examples() {
        let x = mat(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        assert_eq!(nmse(&x, &x).unwrap(), 0.0);
        assert_eq!(nmse(&DMatrix::zeros(2, 2), &x).unwrap(), 1.0);
        assert!((nmse(&(&x * 2.0), &x).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmse(&x, &DMatrix::zeros(2, 2)), Err(Error::DegenerateReference));
    }

    #[test]
    fn failure_examples() {
        let x = mat(3, 2, &[1.0, 2.0, 0.0, 0.0, -1.0, 0.5]);
        let rule = FailureRule::NOISELESS;
        assert!(!trial_failure(&x, &x, rule));
        assert!(trial_failure(&DMatrix::zeros(3, 2), &x, rule));
        // correct support, nmse = 10 * tol
        let scale = 1.0 + (10.0 * rule.nmse_tol).sqrt();
        let off = &x * scale;
        assert!((nmse(&off, &x).unwrap() - 10.0 * rule.nmse_tol).abs() < 1e-12);
        assert_eq!(extract_support(&off, rule.tau_rel), extract_support(&x, rule.tau_rel));
        assert!(trial_failure(&off, &x, rule));
    }

    #[test]
    fn problem_validation() {
        let phi = mat(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            MmvProblem::new(phi, DMatrix::zeros(2, 1), 0.0),
            Err(Error::InvalidProblem(_))
        ));
        let phi = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(MmvProblem::new(phi.clone(), DMatrix::zeros(3, 1), 0.0), Err(Error::DimensionMismatch(_))));
        assert!(MmvProblem::new(phi, DMatrix::zeros(2, 1), -1.0).is_err());
    }
}
