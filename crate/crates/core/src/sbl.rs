//! Sparse Bayesian learning for the MMV model: the correlation-aware EM
//! solver (learned row correlation `B`) and its `B = I` baseline.
//!
//! The shared prior makes the marginal covariance a Kronecker product,
//! `Σ_y = λI + (ΦΓΦᵀ) ⊗ B`. Rotating the columns by the eigenvectors of `B`
//! decouples the `L` columns, so no `NL × NL` or `ML × ML` system is ever
//! formed inside the solver loop. Two exact factorizations are used:
//!
//! * dual: eigendecomposition of the `N × N` matrix `ΦΓΦᵀ` (many active rows);
//! * primal: Cholesky of `λ/b_k·Γ⁻¹ + Φ_SᵀΦ_S` on the active set `S` (few
//!   active rows). This keeps the log-determinant accurate when `λ` is tiny.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, cholesky_jitter, floor_with_trace, sym_eigen, symmetrize, toeplitz_ar1};
use crate::model::{extract_support, Hyperparams, MmvProblem, SolutionEstimate};

/// Support threshold used for [`SolutionEstimate::support`].
pub const SUPPORT_TAU: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Use `problem.lambda` (floored).
    Fixed,
    /// Learn the noise variance by EM.
    EmUpdate,
    /// Noiseless data: `λ = lambda_floor` throughout.
    NoiselessFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BMode {
    Identity,
    Free,
    Ar1,
}

impl BMode {
    /// AR(1) structure for short rows, unstructured otherwise.
    pub fn auto(l: usize) -> BMode {
        if l <= 8 {
            BMode::Ar1
        } else {
            BMode::Free
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SblOptions {
    pub max_iters: usize,
    /// Stop when `max |Δγ| < tol_gamma · max γ`.
    pub tol_gamma: f64,
    /// Rows with `γ_i < prune_threshold · max γ` are removed for good.
    pub prune_threshold: f64,
    pub lambda_mode: LambdaMode,
    pub lambda_floor: f64,
    /// `None` picks [`BMode::auto`] from `L`.
    pub b_mode: Option<BMode>,
    pub b_pd_floor: f64,
}

impl Default for SblOptions {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            tol_gamma: 1e-8,
            prune_threshold: 1e-8,
            lambda_mode: LambdaMode::Fixed,
            lambda_floor: 1e-10,
            b_mode: None,
            b_pd_floor: 1e-6,
        }
    }
}

impl SblOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidOption("max_iters must be >= 1".into()));
        }
        if !(self.tol_gamma > 0.0 && self.lambda_floor > 0.0 && self.b_pd_floor > 0.0) {
            return Err(Error::InvalidOption("tolerances and floors must be > 0".into()));
        }
        if !(self.prune_threshold >= 0.0 && self.prune_threshold < 1.0) {
            return Err(Error::InvalidOption("prune_threshold must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn noiseless() -> Self {
        Self { lambda_mode: LambdaMode::NoiselessFloor, ..Self::default() }
    }
}

/// Posterior moments from the structured factorization.
#[derive(Debug, Clone)]
pub struct StructuredPosterior {
    /// Posterior mean, `M × L`; inactive rows are zero.
    pub x: DMatrix<f64>,
    /// Diagonal blocks `Σ_x^i`; inactive rows are zero.
    pub sigma_blocks: Vec<DMatrix<f64>>,
    /// Type-II cost `log|Σ_y| + yᵀΣ_y⁻¹y` at the input hyperparameters.
    pub cost: f64,
}

/// Rows with `γ_i > 0`.
pub fn active_rows(gamma: &DVector<f64>) -> Vec<usize> {
    gamma.iter().enumerate().filter(|(_, &g)| g > 0.0).map(|(i, _)| i).collect()
}

/// Posterior mean, diagonal covariance blocks and cost for the shared-`B`
/// prior, exploiting `Σ_y = λI + (ΦΓΦᵀ) ⊗ B`.
pub fn structured_posterior(phi: &DMatrix<f64>, y: &DMatrix<f64>, hyper: &Hyperparams) -> Result<StructuredPosterior> {
    let (n, m) = phi.shape();
    let l = y.ncols();
    let lambda = hyper.lambda;
    if !(lambda > 0.0) {
        return Err(Error::InvalidProblem("lambda must be > 0 for the posterior".into()));
    }
    let active = active_rows(&hyper.gamma);
    let mut x = DMatrix::zeros(m, l);
    let mut sigma_blocks = vec![DMatrix::zeros(l, l); m];
    if active.is_empty() {
        let cost = (n * l) as f64 * lambda.ln() + y.norm_squared() / lambda;
        return Ok(StructuredPosterior { x, sigma_blocks, cost });
    }

    let (bvals, bvecs) = sym_eigen(&hyper.b);
    if bvals[0] <= 0.0 {
        return Err(Error::NonPositiveB);
    }
    let yv = y * &bvecs;
    let k = active.len();
    let phi_s = phi.select_columns(active.iter());
    let gam: Vec<f64> = active.iter().map(|&i| hyper.gamma[i]).collect();

    let rotated = if k <= n {
        primal(&phi_s, &yv, &gam, bvals.as_slice(), lambda)?
    } else if k <= 2 * n && primal_better(&phi_s, &gam, bvals.as_slice(), lambda) {
        primal(&phi_s, &yv, &gam, bvals.as_slice(), lambda)?
    } else {
        dual(&phi_s, &yv, &gam, bvals.as_slice(), lambda)
    };

    let xs = &rotated.x * bvecs.transpose();
    for (r, &i) in active.iter().enumerate() {
        x.set_row(i, &xs.row(r));
        let d = DVector::from_iterator(l, rotated.var.row(r).iter().map(|v| v.max(0.0)));
        let mut s = &bvecs * DMatrix::from_diagonal(&d) * bvecs.transpose();
        symmetrize(&mut s);
        sigma_blocks[i] = s;
    }
    Ok(StructuredPosterior { x, sigma_blocks, cost: rotated.cost })
}

/// Posterior in the `B`-eigenbasis: `x` holds `X_S V`, `var[(r, k)]` the
/// `k`-th eigen-direction variance of active row `r`.
struct Rotated {
    x: DMatrix<f64>,
    var: DMatrix<f64>,
    cost: f64,
}

fn primal(phi_s: &DMatrix<f64>, yv: &DMatrix<f64>, gam: &[f64], bvals: &[f64], lambda: f64) -> Result<Rotated> {
    let (n, k) = phi_s.shape();
    let l = yv.ncols();
    let gram = phi_s.tr_mul(phi_s);
    let rhs = phi_s.tr_mul(yv);
    let mut x = DMatrix::zeros(k, l);
    let mut var = DMatrix::zeros(k, l);
    let mut logdet_sum = 0.0;

    // columns with equal eigenvalues of B share one factorization (always for B = I)
    let mut cache: Option<(f64, nalgebra::Cholesky<f64, nalgebra::Dyn>, DVector<f64>, f64)> = None;
    for c in 0..l {
        let bk = bvals[c];
        let reuse = matches!(&cache, Some((b, ..)) if *b == bk);
        if !reuse {
            let mut sys = gram.clone();
            for r in 0..k {
                sys[(r, r)] += lambda / (bk * gam[r]);
            }
            let chol = cholesky_jitter(&sys)?;
            let inv = chol.inverse();
            let diag = inv.diagonal();
            let ld = chol_logdet(&chol);
            cache = Some((bk, chol, diag, ld));
        }
        let (_, chol, diag, ld) = cache.as_ref().expect("factorization cached above");
        let sol = chol.solve(&rhs.column(c).into_owned());
        x.set_column(c, &sol);
        var.set_column(c, &(diag * lambda));
        logdet_sum += ld;
    }

    let resid = yv - phi_s * &x;
    let mut quad = resid.norm_squared() / lambda;
    let mut prior_logdet = 0.0;
    for r in 0..k {
        prior_logdet += l as f64 * gam[r].ln();
        for c in 0..l {
            quad += x[(r, c)] * x[(r, c)] / (gam[r] * bvals[c]);
        }
    }
    prior_logdet += k as f64 * bvals.iter().map(|b| b.ln()).sum::<f64>();
    let cost = (n as f64 - k as f64) * l as f64 * lambda.ln()
        + prior_logdet
        + logdet_sum
        + quad;
    Ok(Rotated { x, var, cost })
}

/// Compare the conditioning that limits each route's log-determinant when
/// more rows than measurements are active: the primal system's condition
/// number against `‖A‖·b_max / (λ + a_min·b_min)` for the dual one.
fn primal_better(phi_s: &DMatrix<f64>, gam: &[f64], bvals: &[f64], lambda: f64) -> bool {
    let k = phi_s.ncols();
    let (b_min, b_max) = (bvals[0], bvals[bvals.len() - 1]);
    let mut sys = phi_s.tr_mul(phi_s);
    for r in 0..k {
        sys[(r, r)] += lambda / (b_max * gam[r]);
    }
    let (pv, _) = sym_eigen(&sys);
    let primal_cond = pv[k - 1] / pv[0].max(f64::MIN_POSITIVE);

    let mut a = DMatrix::zeros(phi_s.nrows(), phi_s.nrows());
    for r in 0..k {
        let col = phi_s.column(r);
        a.ger(gam[r], &col, &col, 1.0);
    }
    let (av, _) = sym_eigen(&a);
    let n = av.len();
    let dual_cond = av[n - 1] * b_max / (lambda + av[0].max(0.0) * b_min);
    primal_cond < dual_cond
}

fn dual(phi_s: &DMatrix<f64>, yv: &DMatrix<f64>, gam: &[f64], bvals: &[f64], lambda: f64) -> Rotated {
    let (n, k) = phi_s.shape();
    let l = yv.ncols();
    let mut a = DMatrix::zeros(n, n);
    for r in 0..k {
        let col = phi_s.column(r);
        a.ger(gam[r], &col, &col, 1.0);
    }
    let (avals, u) = sym_eigen(&a);
    let avals: Vec<f64> = avals.iter().map(|v| v.max(0.0)).collect();
    let yt = u.tr_mul(yv);
    let p = u.tr_mul(phi_s);
    let f = DMatrix::from_fn(n, l, |j, c| 1.0 / (lambda + avals[j] * bvals[c]));

    let mut cost = 0.0;
    for j in 0..n {
        for c in 0..l {
            cost += (lambda + avals[j] * bvals[c]).ln() + yt[(j, c)] * yt[(j, c)] * f[(j, c)];
        }
    }
    let zb = DMatrix::from_fn(n, l, |j, c| yt[(j, c)] * f[(j, c)] * bvals[c]);
    let mut x = p.tr_mul(&zb);
    let s = p.map(|v| v * v).tr_mul(&f);
    let mut var = DMatrix::zeros(k, l);
    for r in 0..k {
        let g = gam[r];
        for c in 0..l {
            x[(r, c)] *= g;
            let bg = g * bvals[c];
            var[(r, c)] = bg - bg * bg * s[(r, c)];
        }
    }
    Rotated { x, var, cost }
}

/// `γ_i = (1/L)·Tr[B⁻¹Σ_x^i] + (1/L)·x_iᵀB⁻¹x_i` for every row.
pub fn update_gamma(x: &DMatrix<f64>, sigma_blocks: &[DMatrix<f64>], b: &DMatrix<f64>) -> Result<DVector<f64>> {
    let l = x.ncols();
    let chol = cholesky_jitter(b)?;
    let b_inv = chol.inverse();
    let g = DVector::from_fn(x.nrows(), |i, _| {
        let xi = x.row(i).transpose();
        let tr = (&b_inv * &sigma_blocks[i]).trace();
        let quad = xi.dot(&(&b_inv * &xi));
        ((tr + quad) / l as f64).max(0.0)
    });
    Ok(g)
}

/// `S = Σ_{i active} (Σ_x^i + x_i x_iᵀ) / γ_i` and the active count.
pub fn scatter(x: &DMatrix<f64>, sigma_blocks: &[DMatrix<f64>], gamma: &DVector<f64>) -> (DMatrix<f64>, usize) {
    let l = x.ncols();
    let mut s = DMatrix::zeros(l, l);
    let mut count = 0;
    for (i, &g) in gamma.iter().enumerate() {
        if g > 0.0 {
            let xi = x.row(i).transpose();
            s += (&sigma_blocks[i] + &xi * xi.transpose()) / g;
            count += 1;
        }
    }
    symmetrize(&mut s);
    (s, count)
}

/// Correlation-matrix update: raw `B̃ = (1/M′)·Σ (Σ_x^i + x_i x_iᵀ)/γ_i` over
/// active rows, symmetrized, shaped by `mode`, then rescaled to trace `L`.
pub fn update_b(
    x: &DMatrix<f64>,
    sigma_blocks: &[DMatrix<f64>],
    gamma: &DVector<f64>,
    mode: BMode,
    pd_floor: f64,
) -> Result<DMatrix<f64>> {
    let (s, active) = scatter(x, sigma_blocks, gamma);
    if active == 0 {
        return Err(Error::NoActiveRows);
    }
    let raw = s / active as f64;
    shape_b(&raw, mode, pd_floor)
}

/// Apply the structural constraint of `mode` to a symmetric estimate and
/// normalize to trace `L` with every eigenvalue at or above `pd_floor`.
pub fn shape_b(raw: &DMatrix<f64>, mode: BMode, pd_floor: f64) -> Result<DMatrix<f64>> {
    let l = raw.nrows();
    let shaped = match mode {
        BMode::Identity => return Ok(DMatrix::identity(l, l)),
        BMode::Ar1 => toeplitz_ar1(ar1_coefficient(raw), l),
        BMode::Free => {
            let mut sym = raw.clone();
            symmetrize(&mut sym);
            sym
        }
    };
    let tr = shaped.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::NonPositiveB);
    }
    let mut b = shaped * (l as f64 / tr);
    symmetrize(&mut b);
    if crate::linalg::min_eigenvalue(&b) >= pd_floor && (b.trace() - l as f64).abs() <= 1e-12 * l as f64 {
        return Ok(b);
    }
    floor_with_trace(&b, pd_floor, l as f64).ok_or(Error::NonPositiveB)
}

/// `clamp(mean first off-diagonal / mean diagonal, −0.99, 0.99)`; zero for `L = 1`.
pub fn ar1_coefficient(raw: &DMatrix<f64>) -> f64 {
    let l = raw.nrows();
    if l < 2 {
        return 0.0;
    }
    let diag = raw.diagonal().mean();
    let off = (0..l - 1).map(|a| 0.5 * (raw[(a, a + 1)] + raw[(a + 1, a)])).sum::<f64>() / (l - 1) as f64;
    if !(diag > 0.0) {
        return 0.0;
    }
    (off / diag).clamp(-0.99, 0.99)
}

/// Noise-variance update `[‖y − Dx‖² + Σ_i ‖Φ_i‖²·Tr(Σ_x^i)] / (NL)`,
/// floored at `floor`. Only the diagonal blocks of `Σ_x` enter, so this is
/// not an exact EM step and the cost may rise while `λ` is learned.
pub fn update_lambda(
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
    x: &DMatrix<f64>,
    sigma_blocks: &[DMatrix<f64>],
    floor: f64,
) -> f64 {
    let (n, l) = y.shape();
    let resid = (y - phi * x).norm_squared();
    let spread: f64 = sigma_blocks
        .iter()
        .enumerate()
        .map(|(i, s)| phi.column(i).norm_squared() * s.trace())
        .sum();
    ((resid + spread) / (n * l) as f64).max(floor)
}

/// Negative expected complete-data log-likelihood in `(γ, B)`, up to constants.
fn q_value(s: &DMatrix<f64>, active: usize, b: &DMatrix<f64>) -> Result<(f64, f64)> {
    let l = b.nrows();
    let chol = cholesky_jitter(b)?;
    let tr = (chol.inverse() * s).trace();
    // optimal scale c absorbed into γ
    let c = tr / (active * l) as f64;
    let q = (active * l) as f64 * c.ln() + active as f64 * chol_logdet(&chol);
    Ok((q, c))
}

fn initial_lambda(problem: &MmvProblem, opts: &SblOptions) -> f64 {
    match opts.lambda_mode {
        LambdaMode::NoiselessFloor => opts.lambda_floor,
        LambdaMode::Fixed => problem.lambda.max(opts.lambda_floor),
        LambdaMode::EmUpdate => {
            let n = problem.n() as f64;
            let mean_col = problem.y.column_iter().map(|c| c.norm_squared()).sum::<f64>() / problem.l() as f64;
            (1e-2 * mean_col / n).max(opts.lambda_floor)
        }
    }
}

/// Iterate the EM updates (posterior, γ, B, optionally λ) from `init`.
pub fn sbl_iterate(problem: &MmvProblem, opts: &SblOptions, mode: BMode, init: Hyperparams) -> Result<SolutionEstimate> {
    opts.validate()?;
    let (m, l) = (problem.m(), problem.l());
    if problem.y.iter().all(|&v| v == 0.0) {
        let hyper = Hyperparams::new(DVector::zeros(m), init.b, init.lambda);
        return Ok(SolutionEstimate {
            x: DMatrix::zeros(m, l),
            hyper,
            support: Vec::new(),
            cost_trace: Vec::new(),
            iterations: 0,
            converged: true,
        });
    }
    let mode = if l == 1 { BMode::Identity } else { mode };

    let mut hyper = init;
    let mut cost_trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut post = structured_posterior(&problem.phi, &problem.y, &hyper)?;

    for it in 0..opts.max_iters {
        iterations = it + 1;
        cost_trace.push(post.cost);

        let mut gamma = update_gamma(&post.x, &post.sigma_blocks, &hyper.b)?;
        for (g, &old) in gamma.iter_mut().zip(hyper.gamma.iter()) {
            if old == 0.0 {
                *g = 0.0;
            }
        }

        let mut next_b = hyper.b.clone();
        if gamma.max() > 0.0 && mode != BMode::Identity {
            let (s, active) = scatter(&post.x, &post.sigma_blocks, &gamma);
            let raw = &s / active as f64;
            let candidate = shape_b(&raw, mode, opts.b_pd_floor)?;
            let (q_new, c_new) = q_value(&s, active, &candidate)?;
            let (q_old, c_old) = q_value(&s, active, &hyper.b)?;
            // keep the previous shape when the constrained estimate would not
            // decrease the EM objective
            let (b, c) = if q_new <= q_old { (candidate, c_new) } else { (hyper.b.clone(), c_old) };
            gamma *= c;
            next_b = b;
        }

        let next_lambda = if opts.lambda_mode == LambdaMode::EmUpdate {
            update_lambda(&problem.phi, &problem.y, &post.x, &post.sigma_blocks, opts.lambda_floor)
        } else {
            hyper.lambda
        };

        let delta = gamma.iter().zip(hyper.gamma.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = hyper.gamma.max();
        let mut next = Hyperparams::new(gamma, next_b, next_lambda);
        post = structured_posterior(&problem.phi, &problem.y, &next)?;

        // pruning is a separate move, taken only when it does not raise the cost
        let gmax = next.gamma.max();
        let cut = opts.prune_threshold * gmax;
        if gmax > 0.0 && next.gamma.iter().any(|&g| g > 0.0 && g < cut) {
            let mut pruned = next.clone();
            pruned.gamma.iter_mut().filter(|g| **g < cut).for_each(|g| *g = 0.0);
            let pruned_post = structured_posterior(&problem.phi, &problem.y, &pruned)?;
            if pruned_post.cost <= post.cost + 1e-13 * post.cost.abs() {
                next = pruned;
                post = pruned_post;
            }
        }
        hyper = next;

        if hyper.gamma.max() == 0.0 || delta < opts.tol_gamma * scale {
            converged = true;
            cost_trace.push(post.cost);
            break;
        }
    }

    let support = extract_support(&post.x, SUPPORT_TAU);
    Ok(SolutionEstimate { x: post.x, hyper, support, cost_trace, iterations, converged })
}

/// Correlation-aware SBL (`B` learned).
pub fn tsbl_solve(problem: &MmvProblem, opts: &SblOptions) -> Result<SolutionEstimate> {
    let mode = opts.b_mode.unwrap_or_else(|| BMode::auto(problem.l()));
    if mode == BMode::Identity {
        return Err(Error::InvalidOption("tsbl requires b_mode free or ar1".into()));
    }
    let init = Hyperparams::uniform(problem.m(), problem.l(), initial_lambda(problem, opts));
    sbl_iterate(problem, opts, mode, init)
}

/// SBL with `B = I` held fixed.
pub fn msbl_solve(problem: &MmvProblem, opts: &SblOptions) -> Result<SolutionEstimate> {
    let init = Hyperparams::uniform(problem.m(), problem.l(), initial_lambda(problem, opts));
    sbl_iterate(problem, opts, BMode::Identity, init)
}
