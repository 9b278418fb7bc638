//! Name-keyed solver registry. Every algorithm sits behind [`Solver`] so the
//! harness can pick them from configuration at runtime.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{MmvProblem, SolutionEstimate};
use crate::reweighted::{
    group_lasso_solve, noiseless_penalty, rw_l1_candes_solve, rw_l1_sbl_solve, rw_l2_solve, BSource, CandesRule,
    L2Rule, ReweightOptions,
};
use crate::sbl::{msbl_solve, tsbl_solve, SblOptions};

/// Everything a solver may need besides the problem itself.
#[derive(Debug, Clone)]
pub struct SolveContext {
    pub sbl: SblOptions,
    pub reweight_l1: ReweightOptions,
    pub reweight_l2: ReweightOptions,
    /// Generator's row correlation, for the solvers that are told the truth.
    pub true_b: Option<DMatrix<f64>>,
}

impl Default for SolveContext {
    fn default() -> Self {
        Self {
            sbl: SblOptions::default(),
            reweight_l1: ReweightOptions::l1(),
            reweight_l2: ReweightOptions::l2(),
            true_b: None,
        }
    }
}

pub trait Solver: Send + Sync {
    fn id(&self) -> &'static str;
    fn solve(&self, problem: &MmvProblem, ctx: &SolveContext) -> Result<SolutionEstimate>;
}

/// A solver backed by a plain function.
pub struct FnSolver {
    id: &'static str,
    run: fn(&MmvProblem, &SolveContext) -> Result<SolutionEstimate>,
}

impl FnSolver {
    pub fn new(id: &'static str, run: fn(&MmvProblem, &SolveContext) -> Result<SolutionEstimate>) -> Self {
        Self { id, run }
    }
}

impl Solver for FnSolver {
    fn id(&self) -> &'static str {
        self.id
    }

    fn solve(&self, problem: &MmvProblem, ctx: &SolveContext) -> Result<SolutionEstimate> {
        (self.run)(problem, ctx)
    }
}

/// Penalized solvers read `λ` as a regularization weight; noiseless data get
/// a tiny one.
fn penalized(problem: &MmvProblem) -> MmvProblem {
    if problem.lambda > 0.0 {
        problem.clone()
    } else {
        problem.with_lambda(noiseless_penalty(&problem.y))
    }
}

fn l1_with(ctx: &SolveContext, b_source: BSource) -> ReweightOptions {
    ReweightOptions { b_source, true_b: ctx.true_b.clone(), ..ctx.reweight_l1.clone() }
}

pub const BUILTIN_IDS: [&str; 10] = [
    "tsbl",
    "msbl",
    "rw_l2_plain",
    "rw_l2_md",
    "rw_l1_sbl",
    "rw_l1_msbl",
    "rw_l1_candes",
    "rw_l1_md_true_b",
    "rw_l1_md_learned_b",
    "group_lasso",
];

#[derive(Default)]
pub struct Registry {
    solvers: BTreeMap<&'static str, Box<dyn Solver>>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// All solvers shipped with the crate.
    pub fn builtin() -> Self {
        let mut r = Self::new();
        r.register(Box::new(FnSolver::new("tsbl", |p, c| tsbl_solve(p, &c.sbl))));
        r.register(Box::new(FnSolver::new("msbl", |p, c| msbl_solve(p, &c.sbl))));
        r.register(Box::new(FnSolver::new("rw_l2_plain", |p, c| {
            rw_l2_solve(&penalized(p), L2Rule::LqNorm, &c.reweight_l2)
        })));
        r.register(Box::new(FnSolver::new("rw_l2_md", |p, c| {
            rw_l2_solve(&penalized(p), L2Rule::Mahalanobis, &c.reweight_l2)
        })));
        r.register(Box::new(FnSolver::new("rw_l1_sbl", |p, c| {
            rw_l1_sbl_solve(&penalized(p), &l1_with(c, BSource::Learned))
        })));
        r.register(Box::new(FnSolver::new("rw_l1_msbl", |p, c| {
            rw_l1_sbl_solve(&penalized(p), &l1_with(c, BSource::Identity))
        })));
        r.register(Box::new(FnSolver::new("rw_l1_candes", |p, c| {
            rw_l1_candes_solve(&penalized(p), CandesRule::L2Norm, &c.reweight_l1)
        })));
        r.register(Box::new(FnSolver::new("rw_l1_md_true_b", |p, c| {
            rw_l1_candes_solve(&penalized(p), CandesRule::MdTrueB, &l1_with(c, BSource::TrueB))
        })));
        r.register(Box::new(FnSolver::new("rw_l1_md_learned_b", |p, c| {
            rw_l1_candes_solve(&penalized(p), CandesRule::MdLearnedB, &c.reweight_l1)
        })));
        r.register(Box::new(FnSolver::new("group_lasso", |p, c| group_lasso_solve(&penalized(p), &c.reweight_l1))));
        r
    }

    /// Insert or replace a solver under its id.
    pub fn register(&mut self, solver: Box<dyn Solver>) {
        self.solvers.insert(solver.id(), solver);
    }

    pub fn get(&self, id: &str) -> Result<&dyn Solver> {
        self.solvers.get(id).map(|s| s.as_ref()).ok_or_else(|| Error::UnknownAlgorithm(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.solvers.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.solvers.keys().copied()
    }

    /// Check a list of ids, failing on the first unknown one.
    pub fn validate_ids<S: AsRef<str>>(&self, ids: &[S]) -> Result<()> {
        match ids.iter().find(|id| !self.contains(id.as_ref())) {
            Some(bad) => Err(Error::UnknownAlgorithm(bad.as_ref().to_string())),
            None => Ok(()),
        }
    }
}
