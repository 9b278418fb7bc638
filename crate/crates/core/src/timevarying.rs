//! Time-varying supports approximated by a run of short MMV windows, each
//! solved on its own and stitched back together column-wise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Hyperparams, MmvProblem};
use crate::sbl::{msbl_solve, sbl_iterate, tsbl_solve, BMode, SblOptions};

/// Consecutive column ranges `start..end` covering `0..t_total`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub t_total: usize,
    pub window_len: usize,
    pub boundaries: Vec<(usize, usize)>,
}

/// Split `t_total` columns into windows of `window_len`; the last one may be shorter.
pub fn window_split(t_total: usize, window_len: usize) -> WindowPlan {
    assert!(window_len >= 1, "window_len must be >= 1");
    let boundaries = (0..t_total).step_by(window_len).map(|s| (s, (s + window_len).min(t_total))).collect();
    WindowPlan { t_total, window_len, boundaries }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSolver {
    Tsbl,
    Msbl,
}

impl WindowSolver {
    pub fn id(self) -> &'static str {
        match self {
            WindowSolver::Tsbl => "tsbl",
            WindowSolver::Msbl => "msbl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowDiagnostics {
    pub start: usize,
    pub end: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Set when the window's solve failed; its columns are left at zero.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowOptions {
    pub sbl: SblOptions,
    /// Start each window from the previous window's `γ` and `λ`.
    pub warm_start: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self { sbl: SblOptions::default(), warm_start: false }
    }
}

/// Solve every window of `y` and concatenate the estimates.
pub fn solve_windows(
    phi: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
    plan: &WindowPlan,
    solver: WindowSolver,
    opts: &WindowOptions,
) -> (DMatrix<f64>, Vec<WindowDiagnostics>) {
    let m = phi.ncols();
    let mut x_hat = DMatrix::zeros(m, y.ncols());
    let mut diags = Vec::with_capacity(plan.boundaries.len());
    let mut carry: Option<(DVector<f64>, f64)> = None;

    for &(start, end) in &plan.boundaries {
        let block = y.columns(start, end - start).into_owned();
        let outcome = MmvProblem::new(phi.clone(), block, lambda).and_then(|p| {
            match (&carry, opts.warm_start) {
                (Some((gamma, lam)), true) => warm_solve(&p, solver, &opts.sbl, gamma, *lam),
                _ => match solver {
                    WindowSolver::Tsbl => tsbl_solve(&p, &opts.sbl),
                    WindowSolver::Msbl => msbl_solve(&p, &opts.sbl),
                },
            }
        });
        match outcome {
            Ok(est) => {
                x_hat.columns_mut(start, end - start).copy_from(&est.x);
                diags.push(WindowDiagnostics {
                    start,
                    end,
                    iterations: est.iterations,
                    converged: est.converged,
                    error: None,
                });
                // pruned rows would never come back; restart them from the mean
                let live = est.hyper.gamma.iter().filter(|&&g| g > 0.0).count().max(1);
                let mean = est.hyper.gamma.sum() / live as f64;
                let gamma = est.hyper.gamma.map(|g| if g > 0.0 { g } else { mean.max(f64::MIN_POSITIVE) });
                carry = Some((gamma, est.hyper.lambda));
            }
            Err(e) => {
                diags.push(WindowDiagnostics { start, end, iterations: 0, converged: false, error: Some(e.to_string()) });
                carry = None;
            }
        }
    }
    (x_hat, diags)
}

fn warm_solve(
    p: &MmvProblem,
    solver: WindowSolver,
    opts: &SblOptions,
    gamma: &DVector<f64>,
    lambda: f64,
) -> Result<crate::model::SolutionEstimate> {
    let l = p.l();
    let mode = match solver {
        WindowSolver::Msbl => BMode::Identity,
        WindowSolver::Tsbl => opts.b_mode.unwrap_or_else(|| BMode::auto(l)),
    };
    let init = Hyperparams::new(gamma.clone(), DMatrix::identity(l, l), lambda.max(opts.lambda_floor));
    sbl_iterate(p, opts, mode, init)
}

/// Sentinel for a column whose reference is zero but whose estimate is not.
pub const UNDEFINED_NMSE: f64 = f64::INFINITY;

/// `‖X̂_t − X_t‖² / ‖X_t‖²` per column; `0/0 → 0`, `x/0 →` [`UNDEFINED_NMSE`].
pub fn per_column_nmse(x_hat: &DMatrix<f64>, x_true: &DMatrix<f64>) -> Vec<f64> {
    assert_eq!(x_hat.shape(), x_true.shape(), "shape mismatch");
    (0..x_true.ncols())
        .map(|t| {
            let den = x_true.column(t).norm_squared();
            let num = (x_hat.column(t) - x_true.column(t)).norm_squared();
            match (num == 0.0, den == 0.0) {
                (true, _) => 0.0,
                (false, true) => UNDEFINED_NMSE,
                (false, false) => num / den,
            }
        })
        .collect()
}
