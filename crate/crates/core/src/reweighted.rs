//! Iterative reweighted ℓ2 and ℓ1 solvers for the MMV model.
//!
//! The ℓ1 family shares one inner problem,
//!
//! ```text
//! min_X ‖Y − ΦX‖_F² + λ Σ_i w_i √(X_i B⁻¹ X_iᵀ)
//! ```
//!
//! which becomes a plain weighted group Lasso in `Z = X B^{-1/2}`. It is solved
//! by FISTA with exact group shrinkage and a monotone restart.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky_jitter, power_iteration_gram, sqrt_and_inv_sqrt, sym_eigen};
use crate::model::{extract_support, Hyperparams, MmvProblem, SolutionEstimate};
use crate::sbl::{shape_b, structured_posterior, update_b, BMode, SUPPORT_TAU};

/// Penalty weight used when the data are noiseless: `1e-6 · ‖Y‖_F² / (NL)`.
pub fn noiseless_penalty(y: &DMatrix<f64>) -> f64 {
    let (n, l) = y.shape();
    1e-6 * y.norm_squared() / (n * l) as f64
}

/// Where the row correlation `B` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BSource {
    Learned,
    TrueB,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReweightOptions {
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// `ε` in the Candès-style weights.
    pub epsilon: f64,
    /// Set `ε = 0.01 · max_i √(X_i B⁻¹ X_iᵀ)` after the first solve; the first
    /// solve then uses uniform unit weights.
    pub auto_epsilon: bool,
    /// Stop FISTA once the KKT residual falls below this.
    pub fista_tol: f64,
    pub fista_max_iters: usize,
    pub b_source: BSource,
    pub b_pd_floor: f64,
    /// Diversity exponent `p` of the ℓ2 weights, `γ_i = (X_i B⁻¹ X_iᵀ / L)^{1 − p/2}`.
    pub l2_p: f64,
    /// Fixed `B` for [`BSource::TrueB`] and [`CandesRule::MdTrueB`].
    #[serde(skip)]
    pub true_b: Option<DMatrix<f64>>,
}

impl ReweightOptions {
    /// Defaults for the ℓ1 family (4 outer passes).
    pub fn l1() -> Self {
        Self {
            outer_iters: 4,
            inner_iters: 10,
            epsilon: 1e-3,
            auto_epsilon: false,
            fista_tol: 1e-6,
            fista_max_iters: 5000,
            b_source: BSource::Learned,
            b_pd_floor: 1e-6,
            l2_p: 0.8,
            true_b: None,
        }
    }

    /// Defaults for the ℓ2 family (15 outer passes).
    pub fn l2() -> Self {
        Self { outer_iters: 15, ..Self::l1() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_iters < 1 || self.inner_iters < 1 || self.fista_max_iters < 1 {
            return Err(Error::InvalidOption("iteration counts must be >= 1".into()));
        }
        if !(self.epsilon > 0.0) || !(self.fista_tol > 0.0) || !(self.b_pd_floor > 0.0) {
            return Err(Error::InvalidOption("epsilon, fista_tol and b_pd_floor must be > 0".into()));
        }
        Ok(())
    }

    fn fixed_b(&self, l: usize) -> Result<DMatrix<f64>> {
        match self.b_source {
            BSource::Learned | BSource::Identity => Ok(DMatrix::identity(l, l)),
            BSource::TrueB => self.true_b_checked(l),
        }
    }

    fn true_b_checked(&self, l: usize) -> Result<DMatrix<f64>> {
        let b = self.true_b.clone().ok_or_else(|| Error::MissingInput("true_b".into()))?;
        if b.shape() != (l, l) {
            return Err(Error::DimensionMismatch(format!("true_b is {:?}, expected {l}x{l}", b.shape())));
        }
        Ok(b)
    }
}

impl Default for ReweightOptions {
    fn default() -> Self {
        Self::l1()
    }
}

/// Weight state of the duality-derived learning rules.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightState {
    pub w: DVector<f64>,
    pub gamma: DVector<f64>,
    pub b: DMatrix<f64>,
}

impl WeightState {
    /// `w = 1`, `γ = 1`, `B = I`.
    pub fn initial(m: usize, l: usize) -> Self {
        Self { w: DVector::from_element(m, 1.0), gamma: DVector::from_element(m, 1.0), b: DMatrix::identity(l, l) }
    }
}

/// Mahalanobis row norms `√(X_i B⁻¹ X_iᵀ)`.
pub fn md_norms(x: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DVector<f64>> {
    let b_inv = cholesky_jitter(b)?.inverse();
    let xb = x * &b_inv;
    Ok(DVector::from_fn(x.nrows(), |i, _| xb.row(i).dot(&x.row(i)).max(0.0).sqrt()))
}

/// Result of one weighted group-Lasso solve.
#[derive(Debug, Clone)]
pub struct GroupLassoFit {
    pub x: DMatrix<f64>,
    pub iterations: usize,
    /// Final KKT residual in the whitened variable.
    pub kkt: f64,
    /// False when the residual is still above tolerance at the iteration cap.
    pub converged: bool,
    /// Objective `‖Y − ΦX‖² + λ Σ w_i √(X_i B⁻¹ X_iᵀ)` per accepted iterate.
    pub objective_trace: Vec<f64>,
}

/// Global minimizer of `‖Y − ΦX‖_F² + λ Σ w_i √(X_i B⁻¹ X_iᵀ)` with
/// `λ = problem.lambda`.
pub fn group_lasso_md(
    problem: &MmvProblem,
    w: &DVector<f64>,
    b: &DMatrix<f64>,
    opts: &ReweightOptions,
) -> Result<GroupLassoFit> {
    group_lasso_md_from(problem, w, b, opts, None)
}

/// [`group_lasso_md`] started from `x0`.
pub fn group_lasso_md_from(
    problem: &MmvProblem,
    w: &DVector<f64>,
    b: &DMatrix<f64>,
    opts: &ReweightOptions,
    x0: Option<&DMatrix<f64>>,
) -> Result<GroupLassoFit> {
    let (m, l) = (problem.m(), problem.l());
    let lambda = problem.lambda;
    if !(lambda > 0.0) {
        return Err(Error::InvalidProblem("group lasso needs lambda > 0".into()));
    }
    if w.len() != m || b.shape() != (l, l) {
        return Err(Error::DimensionMismatch(format!("w has {} entries, B is {:?}", w.len(), b.shape())));
    }
    if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidOption("weights must be positive and finite".into()));
    }
    let (bvals, _) = sym_eigen(b);
    if !(bvals[0] > 0.0) {
        return Err(Error::NonPositiveB);
    }
    let (b_half, b_inv_half) = sqrt_and_inv_sqrt(b);

    let fista = Fista {
        phi: &problem.phi,
        y: &problem.y,
        b_half: &b_half,
        step: 1.0 / (power_iteration_gram(&problem.phi, 500, 1e-10) * bvals[l - 1]),
    };
    let mut z = match x0 {
        Some(x) => x * &b_inv_half,
        None => DMatrix::zeros(m, l),
    };

    // continuation: approach a small target penalty through a geometric
    // sequence of easier problems, each warm-started from the last
    let q = problem.phi.tr_mul(&problem.y) * &b_half;
    let start = 0.5 * (0..m).map(|i| 2.0 * q.row(i).norm() / w[i]).fold(0.0, f64::max);
    let mut stages = Vec::new();
    let mut lam = start;
    while lam > lambda * CONTINUATION_FACTOR.recip() {
        stages.push(lam);
        lam *= CONTINUATION_FACTOR;
    }
    let mut iterations = 0;
    for &lam in &stages {
        let run = fista.run(z, w, lam, STAGE_TOL, opts.fista_max_iters / 10);
        iterations += run.iterations;
        z = run.z;
    }
    let run = fista.run(z, w, lambda, opts.fista_tol, opts.fista_max_iters);
    iterations += run.iterations;

    Ok(GroupLassoFit {
        x: &run.z * &b_half,
        iterations,
        kkt: run.kkt,
        converged: run.kkt <= opts.fista_tol,
        objective_trace: run.objective_trace,
    })
}

const CONTINUATION_FACTOR: f64 = 0.1;
const STAGE_TOL: f64 = 1e-3;

/// Accelerated proximal gradient on `½‖Y − ΦZB^½‖² + (λ/2) Σ w_i ‖Z_i‖`.
/// Each point carries its fitted values `A = ΦZB^½`, which give the exact
/// objective and the gradient `Φᵀ(A − Y)B^½`.
struct Fista<'a> {
    phi: &'a DMatrix<f64>,
    y: &'a DMatrix<f64>,
    b_half: &'a DMatrix<f64>,
    step: f64,
}

struct FistaRun {
    z: DMatrix<f64>,
    iterations: usize,
    kkt: f64,
    objective_trace: Vec<f64>,
}

/// How often the KKT residual is evaluated.
const KKT_EVERY: usize = 5;

impl Fista<'_> {
    /// `ΦZB^½`, skipping zero rows of `Z`.
    fn fitted(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, l) = (self.phi.nrows(), z.ncols());
        let mut a = DMatrix::zeros(n, l);
        for (i, row) in z.row_iter().enumerate() {
            if row.iter().any(|&v| v != 0.0) {
                a.ger(1.0, &self.phi.column(i), &row.transpose(), 1.0);
            }
        }
        a * self.b_half
    }

    fn gradient(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        self.phi.tr_mul(&(a - self.y)) * self.b_half
    }

    fn objective(&self, z: &DMatrix<f64>, a: &DMatrix<f64>, half_pen: &[f64]) -> f64 {
        let fit = 0.5 * (self.y - a).norm_squared();
        fit + z.row_iter().zip(half_pen).map(|(r, h)| h * r.norm()).sum::<f64>()
    }

    /// Gradient step from `v` followed by exact group shrinkage.
    fn prox_step(&self, v: &DMatrix<f64>, av: &DMatrix<f64>, half_pen: &[f64]) -> DMatrix<f64> {
        let mut out = v - self.gradient(av) * self.step;
        for (i, h) in half_pen.iter().enumerate() {
            let nrm = out.row(i).norm();
            let keep = if nrm > 0.0 { (1.0 - self.step * h / nrm).max(0.0) } else { 0.0 };
            out.row_mut(i).scale_mut(keep);
        }
        out
    }

    fn run(&self, mut z: DMatrix<f64>, w: &DVector<f64>, lambda: f64, tol: f64, max_iters: usize) -> FistaRun {
        let half_pen: Vec<f64> = w.iter().map(|wi| 0.5 * lambda * wi).collect();
        let mut az = self.fitted(&z);
        let mut obj = self.objective(&z, &az, &half_pen);
        let mut v = z.clone();
        let mut av = az.clone();
        let mut theta = 1.0_f64;
        let mut objective_trace = vec![2.0 * obj];
        let mut kkt = kkt_residual(&z, &self.gradient(&az), &half_pen);
        let mut iterations = 0;

        while kkt > tol && iterations < max_iters {
            iterations += 1;
            let mut z_next = self.prox_step(&v, &av, &half_pen);
            let mut a_next = self.fitted(&z_next);
            let mut obj_next = self.objective(&z_next, &a_next, &half_pen);
            if obj_next > obj {
                // drop the momentum and take a plain proximal step instead
                z_next = self.prox_step(&z, &az, &half_pen);
                a_next = self.fitted(&z_next);
                obj_next = self.objective(&z_next, &a_next, &half_pen);
                theta = 1.0;
                v = z_next.clone();
                av = a_next.clone();
            } else {
                let theta_next = 0.5 * (1.0 + (1.0 + 4.0 * theta * theta).sqrt());
                let mom = (theta - 1.0) / theta_next;
                v = &z_next + (&z_next - &z) * mom;
                av = &a_next + (&a_next - &az) * mom;
                theta = theta_next;
            }
            obj = obj_next;
            z = z_next;
            az = a_next;
            objective_trace.push(2.0 * obj);
            if iterations % KKT_EVERY == 0 || iterations == max_iters {
                kkt = kkt_residual(&z, &self.gradient(&az), &half_pen);
            }
            if kkt > tol && iterations % POLISH_EVERY == 0 {
                if let Some(zp) = self.polish(&z, &half_pen) {
                    let ap = self.fitted(&zp);
                    let objp = self.objective(&zp, &ap, &half_pen);
                    if objp <= obj {
                        z = zp;
                        az = ap;
                        obj = objp;
                        v = z.clone();
                        av = az.clone();
                        theta = 1.0;
                        *objective_trace.last_mut().expect("nonempty trace") = 2.0 * obj;
                        kkt = kkt_residual(&z, &self.gradient(&az), &half_pen);
                    }
                }
            }
        }
        FistaRun { z, iterations, kkt, objective_trace }
    }

    /// Newton's method on the rows that are currently nonzero, where the
    /// objective is smooth. Only attempted when those rows give a
    /// well-posed least-squares block (`|S| ≤ N`).
    fn polish(&self, z: &DMatrix<f64>, half_pen: &[f64]) -> Option<DMatrix<f64>> {
        let (n, l) = (self.phi.nrows(), z.ncols());
        let active: Vec<usize> = (0..z.nrows()).filter(|&i| z.row(i).iter().any(|&v| v != 0.0)).collect();
        let k = active.len();
        if k == 0 || k > n {
            return None;
        }
        let phi_s = self.phi.select_columns(active.iter());
        let b = self.b_half * self.b_half;
        let gram = phi_s.tr_mul(&phi_s);
        let smooth_hess = gram.kronecker(&b);
        let rhs0 = phi_s.tr_mul(self.y) * self.b_half;
        let mut zs = z.select_rows(active.iter());
        let pen: Vec<f64> = active.iter().map(|&i| half_pen[i]).collect();
        let eval = |zs: &DMatrix<f64>| {
            let fit = 0.5 * (self.y - &phi_s * zs * self.b_half).norm_squared();
            fit + zs.row_iter().zip(&pen).map(|(r, h)| h * r.norm()).sum::<f64>()
        };
        let mut val = eval(&zs);
        for _ in 0..POLISH_STEPS {
            let mut grad = &gram * &zs * &b - &rhs0;
            let mut hess = smooth_hess.clone();
            for (r, h) in pen.iter().enumerate() {
                let zr = zs.row(r).transpose();
                let nrm = zr.norm();
                if nrm == 0.0 {
                    return None;
                }
                let u = &zr / nrm;
                let shifted = grad.row(r) + zr.transpose() * (h / nrm);
                grad.set_row(r, &shifted);
                let curv = (DMatrix::identity(l, l) - &u * u.transpose()) * (h / nrm);
                let mut blk = hess.view_mut((r * l, r * l), (l, l));
                blk += curv;
            }
            let g = crate::model::vectorize(&grad);
            let chol = cholesky_jitter(&hess).ok()?;
            let d = crate::model::devectorize(&chol.solve(&(-&g)), l);
            let slope = g.dot(&crate::model::vectorize(&d));
            if !(slope < 0.0) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-10 {
                let cand = &zs + &d * t;
                let cv = eval(&cand);
                if cv <= val + 1e-4 * t * slope {
                    zs = cand;
                    val = cv;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || -slope <= 1e-30 {
                break;
            }
        }
        let mut out = DMatrix::zeros(z.nrows(), l);
        for (r, &i) in active.iter().enumerate() {
            out.set_row(i, &zs.row(r));
        }
        Some(out)
    }
}

const POLISH_EVERY: usize = 100;
const POLISH_STEPS: usize = 30;

/// Largest row violation of the optimality conditions of the unscaled
/// objective, written in `Z` (gradient `2·grad`, penalty `λ w_i ‖Z_i‖`) and
/// measured relative to each row's penalty weight `λ w_i`.
fn kkt_residual(z: &DMatrix<f64>, grad: &DMatrix<f64>, half_pen: &[f64]) -> f64 {
    let mut worst = 0.0_f64;
    for (i, h) in half_pen.iter().enumerate() {
        let pen = 2.0 * h;
        let zi = z.row(i);
        let gi = grad.row(i) * 2.0;
        let nrm = zi.norm();
        let r = if nrm > 0.0 { (gi + zi * (pen / nrm)).norm() } else { (gi.norm() - pen).max(0.0) };
        worst = worst.max(r / pen);
    }
    worst
}

/// Smallest penalty for which `X = 0` is optimal: `max_i 2‖Φ_iᵀ Y B^{½}‖ / w_i`.
pub fn critical_lambda(phi: &DMatrix<f64>, y: &DMatrix<f64>, w: &DVector<f64>, b: &DMatrix<f64>) -> f64 {
    let (b_half, _) = sqrt_and_inv_sqrt(b);
    let g = phi.tr_mul(y) * b_half;
    g.row_iter().zip(w.iter()).map(|(r, wi)| 2.0 * r.norm() / wi).fold(0.0, f64::max)
}

/// `Φ_iᵀ(λI + ΦΓΦᵀ)⁻¹Φ_i` for every column.
fn leverage(phi: &DMatrix<f64>, gamma: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    let n = phi.nrows();
    let mut g = DMatrix::identity(n, n) * lambda;
    for (i, &gi) in gamma.iter().enumerate() {
        if gi > 0.0 {
            let col = phi.column(i);
            g.ger(gi, &col, &col, 1.0);
        }
    }
    let chol = cholesky_jitter(&g)?;
    let sol = chol.solve(phi);
    Ok(DVector::from_fn(phi.ncols(), |i, _| phi.column(i).dot(&sol.column(i)).max(0.0)))
}

const INNER_TOL: f64 = 1e-10;

fn rel_change(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let scale = a.amax().max(b.amax()).max(f64::MIN_POSITIVE);
    (a - b).amax() / scale
}

/// One run of the inner learning loop for fixed `X`: refresh `γ`, then `w`,
/// then (if `learn_b`) `B`, until the state stops moving or `max_iters`.
/// Returns the new state and whether it converged.
pub fn inner_weight_loop(
    phi: &DMatrix<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    mut state: WeightState,
    learn_b: bool,
    max_iters: usize,
    pd_floor: f64,
) -> Result<(WeightState, bool)> {
    let l = x.ncols();
    for _ in 0..max_iters {
        let md = md_norms(x, &state.b)?;
        let gamma = DVector::from_fn(md.len(), |i, _| 2.0 * md[i] / state.w[i]);
        let lev = leverage(phi, &gamma, lambda)?;
        let w = lev.map(|v| 2.0 * (l as f64 * v).sqrt());
        if w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::SingularSystem { n: phi.nrows() });
        }

        let mut b = state.b.clone();
        if learn_b && gamma.iter().any(|&g| g > 0.0) {
            let c: f64 = gamma.iter().zip(lev.iter()).map(|(g, v)| g * v).sum();
            let mut raw = DMatrix::zeros(l, l);
            for (i, &g) in gamma.iter().enumerate() {
                if g > 0.0 {
                    let xi = x.row(i).transpose();
                    raw += &xi * xi.transpose() / g;
                }
            }
            b = shape_b(&(raw / c), BMode::Free, pd_floor)?;
        }

        let moved = rel_change(&gamma, &state.gamma)
            .max(rel_change(&w, &state.w))
            .max((&b - &state.b).amax() / l as f64);
        state = WeightState { w, gamma, b };
        if moved < INNER_TOL {
            return Ok((state, true));
        }
    }
    Ok((state, false))
}

fn finish(
    problem: &MmvProblem,
    x: DMatrix<f64>,
    gamma: DVector<f64>,
    b: DMatrix<f64>,
    cost_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
) -> SolutionEstimate {
    let support = extract_support(&x, SUPPORT_TAU);
    SolutionEstimate { x, hyper: Hyperparams::new(gamma, b, problem.lambda), support, cost_trace, iterations, converged }
}

/// Plain group Lasso: unit weights, `B = I`, one solve.
pub fn group_lasso_solve(problem: &MmvProblem, opts: &ReweightOptions) -> Result<SolutionEstimate> {
    let (m, l) = (problem.m(), problem.l());
    let fit = group_lasso_md(problem, &DVector::from_element(m, 1.0), &DMatrix::identity(l, l), opts)?;
    let gamma = DVector::from_vec(crate::model::row_norms(&fit.x));
    let objective = *fit.objective_trace.last().expect("trace starts with the initial objective");
    Ok(finish(problem, fit.x, gamma, DMatrix::identity(l, l), vec![objective], 1, fit.converged))
}

/// Reweighted ℓ1 form of correlation-aware SBL: alternate a weighted
/// group-Lasso solve with the inner `w`/`γ`/`B` loop.
pub fn rw_l1_sbl_solve(problem: &MmvProblem, opts: &ReweightOptions) -> Result<SolutionEstimate> {
    opts.validate()?;
    let (m, l) = (problem.m(), problem.l());
    let mut state = WeightState::initial(m, l);
    state.b = opts.fixed_b(l)?;
    let learn_b = opts.b_source == BSource::Learned && l > 1;
    let mut x = DMatrix::zeros(m, l);
    let mut cost_trace = Vec::with_capacity(opts.outer_iters);
    let mut converged = true;

    for k in 0..opts.outer_iters {
        let fit = group_lasso_md_from(problem, &state.w, &state.b, opts, (k > 0).then_some(&x))?;
        converged &= fit.converged;
        cost_trace.push(*fit.objective_trace.last().expect("nonempty trace"));
        x = fit.x;
        let (next, _) = inner_weight_loop(&problem.phi, &x, problem.lambda, state, learn_b, opts.inner_iters, opts.b_pd_floor)?;
        state = next;
    }
    Ok(finish(problem, x, state.gamma, state.b, cost_trace, opts.outer_iters, converged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandesRule {
    /// `w_i = 1/(‖X_i‖₂ + ε)`, `B = I`.
    L2Norm,
    /// Mahalanobis weights with the caller's fixed `B` (`opts.true_b`).
    MdTrueB,
    /// Mahalanobis weights with `B` from the learning rule.
    MdLearnedB,
}

/// Candès-style reweighted ℓ1 with row-norm or Mahalanobis weights.
pub fn rw_l1_candes_solve(problem: &MmvProblem, rule: CandesRule, opts: &ReweightOptions) -> Result<SolutionEstimate> {
    opts.validate()?;
    let (m, l) = (problem.m(), problem.l());
    let mut b = match rule {
        CandesRule::L2Norm | CandesRule::MdLearnedB => DMatrix::identity(l, l),
        CandesRule::MdTrueB => opts.true_b_checked(l)?,
    };
    let mut eps = opts.epsilon;
    let mut w = DVector::from_element(m, if opts.auto_epsilon { 1.0 } else { 1.0 / eps });
    let mut gamma = DVector::zeros(m);
    let mut x = DMatrix::zeros(m, l);
    let mut cost_trace = Vec::with_capacity(opts.outer_iters);
    let mut converged = true;

    for k in 0..opts.outer_iters {
        let fit = group_lasso_md_from(problem, &w, &b, opts, (k > 0).then_some(&x))?;
        converged &= fit.converged;
        cost_trace.push(*fit.objective_trace.last().expect("nonempty trace"));
        x = fit.x;

        let md = md_norms(&x, &b)?;
        gamma = DVector::from_fn(m, |i, _| 2.0 * md[i] / w[i]);
        if rule == CandesRule::MdLearnedB && l > 1 && gamma.iter().any(|&g| g > 0.0) {
            let state = WeightState { w: w.clone(), gamma: gamma.clone(), b: b.clone() };
            let (next, _) = inner_weight_loop(&problem.phi, &x, problem.lambda, state, true, 1, opts.b_pd_floor)?;
            b = next.b;
        }
        let md = md_norms(&x, &b)?;
        if opts.auto_epsilon && k == 0 {
            let top = md.max();
            if top > 0.0 {
                eps = 0.01 * top;
            }
        }
        w = md.map(|v| 1.0 / (v + eps));
    }
    Ok(finish(problem, x, gamma, b, cost_trace, opts.outer_iters, converged))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum L2Rule {
    /// Row-norm weights, `B = I`.
    LqNorm,
    /// Mahalanobis penalty and weights.
    Mahalanobis,
}

/// Reweighted ℓ2: each pass is the closed-form ridge-type solve with prior
/// blocks `γ_i B`, then `γ_i = X_i B⁻¹ X_iᵀ / L` and (learned) `B` from the
/// row scatter.
pub fn rw_l2_solve(problem: &MmvProblem, rule: L2Rule, opts: &ReweightOptions) -> Result<SolutionEstimate> {
    opts.validate()?;
    let (m, l) = (problem.m(), problem.l());
    let lambda = problem.lambda.max(1e-10);
    let b = match rule {
        L2Rule::LqNorm => DMatrix::identity(l, l),
        L2Rule::Mahalanobis => opts.fixed_b(l)?,
    };
    let learn_b = rule == L2Rule::Mahalanobis && opts.b_source == BSource::Learned && l > 1;
    let mut hyper = Hyperparams::new(DVector::from_element(m, 1.0), b, lambda);
    let zero_sigma = vec![DMatrix::zeros(l, l); m];
    let mut cost_trace = Vec::with_capacity(opts.outer_iters);
    let mut x = DMatrix::zeros(m, l);
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..opts.outer_iters {
        iterations += 1;
        let post = structured_posterior(&problem.phi, &problem.y, &hyper)?;
        cost_trace.push(post.cost);
        x = post.x;

        let md = md_norms(&x, &hyper.b)?;
        let mut gamma = md.map(|v| (v * v / l as f64).powf(1.0 - 0.5 * opts.l2_p));
        let cut = 1e-8 * gamma.max();
        gamma.iter_mut().filter(|g| **g < cut).for_each(|g| *g = 0.0);
        let next_b = if learn_b && gamma.max() > 0.0 {
            update_b(&x, &zero_sigma, &gamma, BMode::auto(l), opts.b_pd_floor)?
        } else {
            hyper.b.clone()
        };
        let delta = (&gamma - &hyper.gamma).amax();
        let scale = hyper.gamma.max();
        hyper = Hyperparams::new(gamma, next_b, lambda);
        if hyper.gamma.max() == 0.0 || delta < 1e-8 * scale {
            converged = true;
            break;
        }
    }
    Ok(finish(problem, x, hyper.gamma, hyper.b, cost_trace, iterations, converged))
}

/// Settings for [`g_tc_penalty`].
#[derive(Debug, Clone)]
pub struct PenaltyGrid {
    /// Starting AR(1) coefficients, one alternating run each.
    pub restarts: Vec<f64>,
    /// Extra starting points `(γ, r)`.
    pub starts: Vec<(DVector<f64>, f64)>,
    pub sweeps: usize,
    /// Golden-section iterations per coordinate.
    pub line_iters: usize,
}

impl Default for PenaltyGrid {
    fn default() -> Self {
        Self { restarts: vec![0.0, 0.5, -0.5, 0.9], starts: Vec::new(), sweeps: 60, line_iters: 80 }
    }
}

/// `xᵀΣ₀⁻¹x + log|λI + DΣ₀Dᵀ|` with `Σ₀ = blockdiag(γ_i T(r))`.
pub fn g_tc_objective(x: &DMatrix<f64>, lambda: f64, phi: &DMatrix<f64>, gamma: &DVector<f64>, r: f64) -> f64 {
    let (n, l) = (phi.nrows(), x.ncols());
    let b = crate::linalg::toeplitz_ar1(r, l);
    let (bvals, _) = sym_eigen(&b);
    let b_inv = match cholesky_jitter(&b) {
        Ok(ch) => ch.inverse(),
        Err(_) => return f64::INFINITY,
    };
    let mut quad = 0.0;
    let mut a = DMatrix::zeros(n, n);
    for (i, &g) in gamma.iter().enumerate() {
        let xi = x.row(i);
        let md2 = (xi * &b_inv).dot(&xi);
        if g > 0.0 {
            quad += md2 / g;
            let col = phi.column(i);
            a.ger(g, &col, &col, 1.0);
        } else if md2 > 0.0 {
            return f64::INFINITY;
        }
    }
    let (avals, _) = sym_eigen(&a);
    let logdet: f64 = avals
        .iter()
        .flat_map(|&aj| bvals.iter().map(move |&bk| (lambda + aj.max(0.0) * bk).ln()))
        .sum();
    quad + logdet
}

fn golden(lo: f64, hi: f64, iters: usize, f: impl Fn(f64) -> f64) -> (f64, f64) {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    if fc < fd { (c, fc) } else { (d, fd) }
}

/// Upper bound on the correlation-aware penalty of `x`, minimizing over
/// `γ ≥ 0` and AR(1) `B` by alternating golden-section searches from several
/// starts. Intended for small instances.
pub fn g_tc_penalty(x: &DMatrix<f64>, lambda: f64, phi: &DMatrix<f64>, grid: &PenaltyGrid) -> f64 {
    let (m, l) = x.shape();
    let row2: Vec<f64> = x.row_iter().map(|r| r.norm_squared()).collect();
    let scale = row2.iter().cloned().fold(0.0, f64::max).max(lambda).max(1e-300);
    let (lo, hi) = ((scale * 1e-12).ln(), (scale * 1e6).ln());
    let r_max = 0.995;

    let mut starts: Vec<(DVector<f64>, f64)> = grid
        .restarts
        .iter()
        .map(|&r| (DVector::from_fn(m, |i, _| (row2[i] / l as f64).max(0.0)), r))
        .collect();
    starts.extend(grid.starts.iter().cloned());

    let mut best = f64::INFINITY;
    for (g0, r0) in starts {
        // rows that are exactly zero are best served by γ_i = 0
        let mut gamma = DVector::from_fn(m, |i, _| if row2[i] > 0.0 { g0[i].max(scale * 1e-12) } else { 0.0 });
        let mut r = r0.clamp(-r_max, r_max);
        let mut val = g_tc_objective(x, lambda, phi, &gamma, r);
        for _ in 0..grid.sweeps {
            let before = val;
            for i in (0..m).filter(|&i| row2[i] > 0.0) {
                let cur = gamma[i];
                let f = |t: f64| {
                    let mut g = gamma.clone();
                    g[i] = t.exp();
                    g_tc_objective(x, lambda, phi, &g, r)
                };
                let (t, v) = golden(lo, hi, grid.line_iters, f);
                if v < val {
                    gamma[i] = t.exp();
                    val = v;
                } else {
                    gamma[i] = cur;
                }
            }
            if l > 1 {
                let (t, v) = golden(-r_max, r_max, grid.line_iters, |t| g_tc_objective(x, lambda, phi, &gamma, t));
                if v < val {
                    r = t;
                    val = v;
                }
            }
            if before - val <= 1e-13 * val.abs().max(1.0) {
                break;
            }
        }
        best = best.min(val);
    }
    best
}
