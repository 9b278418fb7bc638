//! Seeded experiment runner: configuration, trial records, the three figure
//! protocols, ad-hoc sweeps and single solves.
//!
//! Every trial's instance depends only on `(master_seed, experiment, point,
//! trial)`, and results are gathered in `(point, trial, algo)` order, so the
//! emitted CSVs do not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Error;
use crate::io::{export_instance, import_instance, write_matrix_csv, write_vector_csv, Instance};
use crate::linalg::toeplitz_ar1;
use crate::model::{nmse, trial_failure, FailureRule, MmvProblem, SolutionEstimate};
use crate::plot::{bar_chart, line_chart, Chart, Series};
use crate::registry::{Registry, SolveContext};
use crate::reweighted::ReweightOptions;
use crate::sbl::{LambdaMode, SblOptions};
use crate::synth::{derive_seed, gen_mmv_instance, gen_timevarying_instance, GroundTruth, MmvGenSpec, RowAmp, ScheduleSpec};
use crate::timevarying::{per_column_nmse, solve_windows, window_split, WindowOptions, WindowSolver};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(Error),
    #[error("solver error: {0}")]
    Solver(Error),
    #[error("output error: {0}")]
    Output(Error),
}

impl HarnessError {
    /// Process exit code: 1 for configuration and I/O problems, 2 for solver failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Output(_) => 1,
            HarnessError::Solver(_) => 2,
        }
    }
}

pub type HarnessResult<T> = std::result::Result<T, HarnessError>;

fn config_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(Error::InvalidOption(msg.into()))
}

fn out_err<E: Into<Error>>(e: E) -> HarnessError {
    HarnessError::Output(e.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fig1,
    Fig2,
    Fig3,
    Sweep,
    Single,
}

impl Experiment {
    pub fn id(self) -> &'static str {
        match self {
            Experiment::Fig1 => "fig1",
            Experiment::Fig2 => "fig2",
            Experiment::Fig3 => "fig3",
            Experiment::Sweep => "sweep",
            Experiment::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Experiment::Fig1, Experiment::Fig2, Experiment::Fig3, Experiment::Sweep, Experiment::Single]
            .into_iter()
            .find(|e| e.id() == s)
    }
}

/// Solver option overrides, merged field by field over the experiment's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOverrides {
    pub sbl: Option<Value>,
    pub reweight_l1: Option<Value>,
    pub reweight_l2: Option<Value>,
}

/// The JSON config file. Every field is optional; missing ones take the
/// experiment's defaults.
///
/// ```json
/// {
///   "experiment": "fig1",
///   "algos": ["tsbl", "msbl", "group_lasso"],
///   "trials": 100,
///   "master_seed": 7,
///   "out_dir": "out/fig1",
///   "threads": 4,
///   "betas": [0.0, 0.9],
///   "ls": [1, 2, 3, 4],
///   "window_lens": [2, 5],
///   "gen": { "n": 25, "m": 125, "k": 12 },
///   "record_runtime": true,
///   "solver_opts": { "sbl": { "max_iters": 3000 } }
/// }
/// ```
///
/// `gen` is merged over a `MmvGenSpec` (fig1, fig2, sweep, single) or a
/// `ScheduleSpec` (fig3). For grid experiments `l`, `corr_beta` and `seed` are
/// set per trial. `instance_dir` makes `single` load an exported instance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub experiment: Option<Experiment>,
    pub algos: Option<Vec<String>>,
    pub trials: Option<usize>,
    pub master_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub betas: Option<Vec<f64>>,
    pub ls: Option<Vec<usize>>,
    pub window_lens: Option<Vec<usize>>,
    pub gen: Option<Value>,
    pub instance_dir: Option<PathBuf>,
    pub record_runtime: Option<bool>,
    pub solver_opts: Option<SolverOverrides>,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> HarnessResult<Self> {
        serde_json::from_str(text).map_err(|e| HarnessError::Config(e.into()))
    }

    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(Error::Io(format!("{}: {e}", path.display()))))?;
        Self::from_json(&text)
    }

    /// Fill defaults for the chosen experiment and validate.
    pub fn resolve(self) -> HarnessResult<ExperimentConfig> {
        let experiment = self.experiment.ok_or_else(|| config_err("no experiment given"))?;
        let mut cfg = ExperimentConfig::defaults(experiment);
        if let Some(seed) = self.master_seed {
            cfg.master_seed = seed;
        }
        if let Some(a) = self.algos {
            cfg.algos = a;
        }
        if let Some(t) = self.trials {
            cfg.trials = t;
        }
        if let Some(o) = self.out_dir {
            cfg.out_dir = o;
        }
        cfg.threads = self.threads.or(cfg.threads);
        if let Some(b) = self.betas {
            cfg.betas = b;
        }
        if let Some(l) = self.ls {
            cfg.ls = l;
        }
        if let Some(w) = self.window_lens {
            cfg.window_lens = w;
        }
        if let Some(r) = self.record_runtime {
            cfg.record_runtime = r;
        }
        cfg.instance_dir = self.instance_dir;

        cfg.gen = match cfg.gen {
            GenConfig::Mmv(spec) => {
                let base = MmvGenSpec { seed: cfg.master_seed, ..spec };
                GenConfig::Mmv(overlay(&base, self.gen.as_ref(), "gen")?)
            }
            GenConfig::Schedule(spec) => {
                let base = ScheduleSpec { seed: cfg.master_seed, ..spec };
                GenConfig::Schedule(overlay(&base, self.gen.as_ref(), "gen")?)
            }
        };
        let so = self.solver_opts.unwrap_or_default();
        cfg.sbl = overlay(&cfg.sbl, so.sbl.as_ref(), "solver_opts.sbl")?;
        cfg.reweight_l1 = overlay(&cfg.reweight_l1, so.reweight_l1.as_ref(), "solver_opts.reweight_l1")?;
        cfg.reweight_l2 = overlay(&cfg.reweight_l2, so.reweight_l2.as_ref(), "solver_opts.reweight_l2")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Shallow-merge a JSON object over the serialized `base`.
fn overlay<T: Serialize + for<'de> Deserialize<'de>>(base: &T, patch: Option<&Value>, what: &str) -> HarnessResult<T> {
    let Some(patch) = patch else {
        return serde_json::from_value(serde_json::to_value(base).map_err(|e| config_err(e.to_string()))?)
            .map_err(|e| config_err(format!("{what}: {e}")));
    };
    let mut merged = serde_json::to_value(base).map_err(|e| config_err(e.to_string()))?;
    let (Value::Object(dst), Value::Object(src)) = (&mut merged, patch) else {
        return Err(config_err(format!("{what} must be a JSON object")));
    };
    for (k, v) in src {
        if !dst.contains_key(k) {
            return Err(config_err(format!("{what}: unknown field {k:?}")));
        }
        dst.insert(k.clone(), v.clone());
    }
    serde_json::from_value(merged).map_err(|e| config_err(format!("{what}: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenConfig {
    Mmv(MmvGenSpec),
    Schedule(ScheduleSpec),
}

/// A fully resolved, validated run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub algos: Vec<String>,
    pub trials: usize,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Worker count; `None` uses every logical core.
    pub threads: Option<usize>,
    pub betas: Vec<f64>,
    pub ls: Vec<usize>,
    pub window_lens: Vec<usize>,
    pub gen: GenConfig,
    pub instance_dir: Option<PathBuf>,
    /// Write measured wall time into `runtime_ms`; when off the column is 0
    /// and trial CSVs are byte-reproducible.
    pub record_runtime: bool,
    pub sbl: SblOptions,
    pub reweight_l1: ReweightOptions,
    pub reweight_l2: ReweightOptions,
}

fn strings(ids: &[&str]) -> Vec<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let mmv = MmvGenSpec { n: 25, m: 125, k: 12, l: 4, corr_beta: 0.9, snr_db: None, row_amp: RowAmp::UnitGauss, seed: 0 };
        let mut cfg = Self {
            experiment,
            algos: strings(&["tsbl", "msbl", "group_lasso"]),
            trials: 100,
            master_seed: 0,
            out_dir: PathBuf::from("out").join(experiment.id()),
            threads: None,
            betas: vec![0.0, 0.9],
            ls: vec![1, 2, 3, 4],
            window_lens: vec![2, 5],
            gen: GenConfig::Mmv(mmv),
            instance_dir: None,
            record_runtime: true,
            sbl: SblOptions::default(),
            reweight_l1: ReweightOptions::l1(),
            reweight_l2: ReweightOptions::l2(),
        };
        match experiment {
            Experiment::Fig1 => {}
            Experiment::Fig2 => {
                cfg.algos = strings(&["rw_l1_sbl", "rw_l1_msbl", "rw_l1_candes", "rw_l1_md_true_b"]);
                cfg.betas = vec![0.9];
                cfg.ls = vec![4];
            }
            Experiment::Fig3 => {
                cfg.algos = strings(&["tsbl", "msbl"]);
                cfg.trials = 20;
                cfg.gen = GenConfig::Schedule(ScheduleSpec::time_varying_default(0));
                cfg.sbl.lambda_mode = LambdaMode::EmUpdate;
            }
            Experiment::Sweep => {
                cfg.algos = strings(&["tsbl", "msbl"]);
                cfg.trials = 20;
            }
            Experiment::Single => {
                cfg.algos = strings(&["tsbl"]);
                cfg.trials = 1;
            }
        }
        cfg
    }

    pub fn validate(&self) -> HarnessResult<()> {
        if self.trials < 1 {
            return Err(config_err("trials must be >= 1"));
        }
        if self.algos.is_empty() {
            return Err(config_err("algos must not be empty"));
        }
        Registry::builtin().validate_ids(&self.algos).map_err(HarnessError::Config)?;
        if self.threads == Some(0) {
            return Err(config_err("threads must be >= 1"));
        }
        self.sbl.validate().map_err(HarnessError::Config)?;
        self.reweight_l1.validate().map_err(HarnessError::Config)?;
        self.reweight_l2.validate().map_err(HarnessError::Config)?;
        match (&self.gen, self.experiment) {
            (GenConfig::Schedule(_), Experiment::Fig3) => {
                if self.window_lens.is_empty() || self.window_lens.contains(&0) {
                    return Err(config_err("window_lens must be nonempty and >= 1"));
                }
                if let Some(bad) = self.algos.iter().find(|a| !matches!(a.as_str(), "tsbl" | "msbl")) {
                    return Err(config_err(format!("fig3 supports tsbl and msbl only, got {bad}")));
                }
            }
            (GenConfig::Mmv(spec), e) if e != Experiment::Fig3 => {
                if e == Experiment::Single {
                    if self.algos.len() != 1 {
                        return Err(config_err("single runs exactly one algorithm"));
                    }
                    if self.instance_dir.is_none() {
                        spec.validate().map_err(HarnessError::Config)?;
                    }
                } else {
                    if self.betas.is_empty() || self.ls.is_empty() || self.ls.contains(&0) {
                        return Err(config_err("betas and ls must be nonempty, ls >= 1"));
                    }
                    for &beta in &self.betas {
                        for &l in &self.ls {
                            MmvGenSpec { l, corr_beta: beta, ..spec.clone() }.validate().map_err(HarnessError::Config)?;
                        }
                    }
                }
            }
            _ => return Err(config_err("gen spec does not match the experiment")),
        }
        Ok(())
    }

    fn grid(&self) -> Vec<(f64, usize)> {
        self.betas.iter().flat_map(|&b| self.ls.iter().map(move |&l| (b, l))).collect()
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub experiment: String,
    pub algo: String,
    pub trial: usize,
    pub seed: u64,
    #[serde(rename = "L")]
    pub l: usize,
    pub beta: Option<f64>,
    pub window_len: Option<usize>,
    pub failure: bool,
    pub nmse: f64,
    pub runtime_ms: u64,
    pub iterations: usize,
}

/// A record plus diagnostics that stay out of the CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub record: TrialRecord,
    /// Largest step-to-step increase of the solver's cost trace; 0 when the
    /// trace never rises.
    pub max_cost_rise: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub outcomes: Vec<TrialOutcome>,
    /// Mean per-column NMSE curves (fig3 only), keyed by series name.
    pub curves: Vec<(String, Vec<f64>)>,
    pub files: Vec<PathBuf>,
}

impl RunSummary {
    pub fn records(&self) -> Vec<TrialRecord> {
        self.outcomes.iter().map(|o| o.record.clone()).collect()
    }
}

pub fn max_cost_rise(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn elapsed_ms(t0: Instant, record: bool) -> u64 {
    if record {
        t0.elapsed().as_millis() as u64
    } else {
        0
    }
}

fn run_pool<T: Send>(threads: Option<usize>, n: usize, job: impl Fn(usize) -> T + Sync + Send) -> HarnessResult<Vec<T>> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        builder = builder.num_threads(t);
    }
    let pool = builder.build().map_err(|e| config_err(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(job).collect()))
}

fn point_label(beta: f64, l: usize) -> String {
    format!("beta={beta},L={l}")
}

/// Seed of one trial's instance. Algorithm ids are deliberately absent.
pub fn trial_seed(master: u64, experiment: Experiment, point: &str, trial: usize) -> u64 {
    derive_seed(master, &[experiment.id(), point, &trial.to_string()])
}

fn base_context(cfg: &ExperimentConfig) -> SolveContext {
    SolveContext { sbl: cfg.sbl, reweight_l1: cfg.reweight_l1.clone(), reweight_l2: cfg.reweight_l2.clone(), true_b: None }
}

fn score(
    cfg: &ExperimentConfig,
    algo: &str,
    trial: usize,
    seed: u64,
    point: (Option<f64>, usize, Option<usize>),
    truth: &GroundTruth,
    rule: FailureRule,
    solved: Result<(DMatrix<f64>, Vec<f64>, usize), String>,
    runtime_ms: u64,
) -> TrialOutcome {
    let (beta, l, window_len) = point;
    let (failure, err, rise, iterations, e) = match solved {
        Ok((x, trace, iterations)) => {
            let err = nmse(&x, &truth.x_true).unwrap_or(f64::NAN);
            (trial_failure(&x, &truth.x_true, rule), err, max_cost_rise(&trace), iterations, None)
        }
        Err(msg) => {
            log::warn!("{} trial {trial} {algo}: {msg}", cfg.experiment.id());
            (true, f64::NAN, 0.0, 0, Some(msg))
        }
    };
    TrialOutcome {
        record: TrialRecord {
            experiment: cfg.experiment.id().to_string(),
            algo: algo.to_string(),
            trial,
            seed,
            l,
            beta,
            window_len,
            failure,
            nmse: err,
            runtime_ms,
            iterations,
        },
        max_cost_rise: rise,
        error: e,
    }
}

fn mmv_trial(cfg: &ExperimentConfig, registry: &Registry, base: &MmvGenSpec, beta: f64, l: usize, trial: usize) -> Vec<TrialOutcome> {
    let seed = trial_seed(cfg.master_seed, cfg.experiment, &point_label(beta, l), trial);
    let spec = MmvGenSpec { l, corr_beta: beta, seed, ..base.clone() };
    let rule = if spec.snr_db.is_some() { FailureRule::NOISY } else { FailureRule::NOISELESS };
    let (problem, truth) = match gen_mmv_instance(&spec) {
        Ok(pair) => pair,
        Err(e) => {
            let empty = GroundTruth::from_x(DMatrix::zeros(spec.m, l), vec![], 0.0);
            return cfg
                .algos
                .iter()
                .map(|a| score(cfg, a, trial, seed, (Some(beta), l, None), &empty, rule, Err(e.to_string()), 0))
                .collect();
        }
    };
    let ctx = SolveContext { true_b: Some(toeplitz_ar1(beta, l)), ..base_context(cfg) };
    cfg.algos
        .iter()
        .map(|algo| {
            let t0 = Instant::now();
            let solved = registry
                .get(algo)
                .and_then(|s| s.solve(&problem, &ctx))
                .map(|est| (est.x, est.cost_trace, est.iterations))
                .map_err(|e| e.to_string());
            let ms = elapsed_ms(t0, cfg.record_runtime);
            score(cfg, algo, trial, seed, (Some(beta), l, None), &truth, rule, solved, ms)
        })
        .collect()
}

fn mmv_base(cfg: &ExperimentConfig) -> HarnessResult<&MmvGenSpec> {
    match &cfg.gen {
        GenConfig::Mmv(s) => Ok(s),
        GenConfig::Schedule(_) => Err(config_err("this experiment needs an MMV gen spec")),
    }
}

fn run_grid(cfg: &ExperimentConfig) -> HarnessResult<Vec<TrialOutcome>> {
    let registry = Registry::builtin();
    let base = mmv_base(cfg)?;
    let grid = cfg.grid();
    let jobs = grid.len() * cfg.trials;
    let per_job = run_pool(cfg.threads, jobs, |j| {
        let (beta, l) = grid[j / cfg.trials];
        mmv_trial(cfg, &registry, base, beta, l, j % cfg.trials)
    })?;
    Ok(per_job.into_iter().flatten().collect())
}

/// Aggregated failure rate per (point, algo).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub algo: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub beta: Option<f64>,
    pub window_len: Option<usize>,
    pub trials: usize,
    pub failures: usize,
    pub failure_rate: f64,
    /// Mean over trials with a finite NMSE.
    pub mean_nmse: f64,
}

/// Group records by `(beta, L, window_len, algo)` in order of first appearance.
pub fn summarize(records: &[TrialRecord]) -> Vec<SummaryRow> {
    let mut rows: Vec<(SummaryRow, f64, usize)> = Vec::new();
    for r in records {
        let key = |s: &SummaryRow| s.algo == r.algo && s.l == r.l && s.beta == r.beta && s.window_len == r.window_len;
        let idx = match rows.iter().position(|(s, _, _)| key(s)) {
            Some(i) => i,
            None => {
                rows.push((
                    SummaryRow {
                        experiment: r.experiment.clone(),
                        algo: r.algo.clone(),
                        l: r.l,
                        beta: r.beta,
                        window_len: r.window_len,
                        trials: 0,
                        failures: 0,
                        failure_rate: 0.0,
                        mean_nmse: f64::NAN,
                    },
                    0.0,
                    0,
                ));
                rows.len() - 1
            }
        };
        let (row, sum, finite) = &mut rows[idx];
        row.trials += 1;
        row.failures += r.failure as usize;
        if r.nmse.is_finite() {
            *sum += r.nmse;
            *finite += 1;
        }
    }
    rows.into_iter()
        .map(|(mut row, sum, finite)| {
            row.failure_rate = row.failures as f64 / row.trials as f64;
            row.mean_nmse = if finite > 0 { sum / finite as f64 } else { f64::NAN };
            row
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(out_err)?;
    for r in rows {
        w.serialize(r).map_err(out_err)?;
    }
    w.flush().map_err(out_err)?;
    Ok(())
}

pub fn read_records(path: &Path) -> HarnessResult<Vec<TrialRecord>> {
    read_csv(path)
}

pub fn read_summary(path: &Path) -> HarnessResult<Vec<SummaryRow>> {
    read_csv(path)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> HarnessResult<Vec<T>> {
    let mut rd = csv::Reader::from_path(path).map_err(out_err)?;
    rd.deserialize().collect::<std::result::Result<Vec<T>, _>>().map_err(out_err)
}

fn prepare_out(cfg: &ExperimentConfig) -> HarnessResult<()> {
    fs::create_dir_all(&cfg.out_dir).map_err(out_err)?;
    let json = serde_json::to_string_pretty(cfg).map_err(out_err)?;
    fs::write(cfg.out_dir.join("config.json"), json + "\n").map_err(out_err)
}

fn write_text(path: PathBuf, text: &str, files: &mut Vec<PathBuf>) -> HarnessResult<()> {
    fs::write(&path, text).map_err(out_err)?;
    files.push(path);
    Ok(())
}

/// Write the trial and summary tables; returns (trials path, summary path).
fn write_tables(cfg: &ExperimentConfig, records: &[TrialRecord], files: &mut Vec<PathBuf>) -> HarnessResult<PathBuf> {
    let id = cfg.experiment.id();
    let trials = cfg.out_dir.join(format!("{id}_trials.csv"));
    write_csv(&trials, records)?;
    files.push(trials);
    let summary = cfg.out_dir.join(format!("{id}_summary.csv"));
    write_csv(&summary, &summarize(records))?;
    files.push(summary.clone());
    Ok(summary)
}

fn failure_vs_l_chart(title: String, rows: &[SummaryRow], series_of: impl Fn(&SummaryRow) -> String) -> String {
    let mut series: Vec<Series> = Vec::new();
    for r in rows {
        let label = series_of(r);
        match series.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((r.l as f64, r.failure_rate)),
            None => series.push(Series { label, points: vec![(r.l as f64, r.failure_rate)] }),
        }
    }
    let chart = Chart { title, x_label: "L".into(), y_label: "failure rate".into(), y_range: Some((0.0, 1.0)) };
    line_chart(&chart, &series)
}

fn beta_tag(beta: f64) -> String {
    format!("{beta}").replace('.', "p")
}

/// Failure rate against `L` for each β and algorithm (two panels by default).
pub fn run_fig1(cfg: &ExperimentConfig) -> HarnessResult<RunSummary> {
    prepare_out(cfg)?;
    let outcomes = run_grid(cfg)?;
    let mut files = Vec::new();
    let summary = write_tables(cfg, &outcomes.iter().map(|o| o.record.clone()).collect::<Vec<_>>(), &mut files)?;
    let rows = read_summary(&summary)?;
    for &beta in &cfg.betas {
        let panel: Vec<SummaryRow> = rows.iter().filter(|r| r.beta == Some(beta)).cloned().collect();
        let svg = failure_vs_l_chart(format!("failure rate, correlation {beta}"), &panel, |r| r.algo.clone());
        write_text(cfg.out_dir.join(format!("fig1_beta{}.svg", beta_tag(beta))), &svg, &mut files)?;
    }
    Ok(RunSummary { outcomes, curves: Vec::new(), files })
}

/// Reweighted-ℓ1 comparison at a single point; bar chart of failure rates.
pub fn run_fig2(cfg: &ExperimentConfig) -> HarnessResult<RunSummary> {
    prepare_out(cfg)?;
    let outcomes = run_grid(cfg)?;
    let mut files = Vec::new();
    let summary = write_tables(cfg, &outcomes.iter().map(|o| o.record.clone()).collect::<Vec<_>>(), &mut files)?;
    let rows = read_summary(&summary)?;
    let bars: Vec<(String, f64)> = if cfg.grid().len() == 1 {
        rows.iter().map(|r| (r.algo.clone(), r.failure_rate)).collect()
    } else {
        rows.iter().map(|r| (format!("{} b={} L={}", r.algo, r.beta.unwrap_or(f64::NAN), r.l), r.failure_rate)).collect()
    };
    let chart = Chart { title: "failure rate".into(), x_label: "algorithm".into(), y_label: "failure rate".into(), y_range: Some((0.0, 1.0)) };
    write_text(cfg.out_dir.join("fig2.svg"), &bar_chart(&chart, &bars), &mut files)?;
    Ok(RunSummary { outcomes, curves: Vec::new(), files })
}

/// Any grid over β and `L`; one line per (algo, β).
pub fn run_sweep(cfg: &ExperimentConfig) -> HarnessResult<RunSummary> {
    prepare_out(cfg)?;
    let outcomes = run_grid(cfg)?;
    let mut files = Vec::new();
    let summary = write_tables(cfg, &outcomes.iter().map(|o| o.record.clone()).collect::<Vec<_>>(), &mut files)?;
    let rows = read_summary(&summary)?;
    let svg = failure_vs_l_chart("failure rate".into(), &rows, |r| format!("{} b={}", r.algo, r.beta.unwrap_or(f64::NAN)));
    write_text(cfg.out_dir.join("sweep.svg"), &svg, &mut files)?;
    Ok(RunSummary { outcomes, curves: Vec::new(), files })
}

fn series_name(algo: &str, window_len: usize) -> String {
    format!("{algo}_w{window_len}")
}

/// Windowed SBL on time-varying supports; per-column mean NMSE curves.
pub fn run_fig3(cfg: &ExperimentConfig) -> HarnessResult<RunSummary> {
    prepare_out(cfg)?;
    let base = match &cfg.gen {
        GenConfig::Schedule(s) => s.clone(),
        GenConfig::Mmv(_) => return Err(config_err("fig3 needs a schedule gen spec")),
    };
    let t_total = base.t_total;
    let rule = if base.snr_db.is_some() { FailureRule::NOISY } else { FailureRule::NOISELESS };
    let wopts = WindowOptions { sbl: cfg.sbl, warm_start: false };

    let per_trial = run_pool(cfg.threads, cfg.trials, |trial| {
        let seed = trial_seed(cfg.master_seed, cfg.experiment, "schedule", trial);
        let spec = ScheduleSpec { seed, ..base.clone() };
        let mut out = Vec::new();
        let generated = gen_timevarying_instance(&spec);
        for &w in &cfg.window_lens {
            for algo in &cfg.algos {
                let solver = if algo == "tsbl" { WindowSolver::Tsbl } else { WindowSolver::Msbl };
                let (outcome, cols) = match &generated {
                    Ok((problem, truth)) => {
                        let t0 = Instant::now();
                        let plan = window_split(t_total, w);
                        let (x, diags) = solve_windows(&problem.phi, &problem.y, problem.lambda, &plan, solver, &wopts);
                        let ms = elapsed_ms(t0, cfg.record_runtime);
                        let iterations = diags.iter().map(|d| d.iterations).sum();
                        let mut o = score(cfg, algo, trial, seed, (None, t_total, Some(w)), truth, rule, Ok((x.clone(), vec![], iterations)), ms);
                        o.error = diags.iter().find_map(|d| d.error.clone());
                        (o, per_column_nmse(&x, &truth.x_true))
                    }
                    Err(e) => {
                        let empty = GroundTruth::from_x(DMatrix::zeros(spec.m, t_total), vec![], 0.0);
                        let o = score(cfg, algo, trial, seed, (None, t_total, Some(w)), &empty, rule, Err(e.to_string()), 0);
                        (o, vec![f64::NAN; t_total])
                    }
                };
                out.push((outcome, cols));
            }
        }
        out
    })?;

    let names: Vec<String> =
        cfg.window_lens.iter().flat_map(|&w| cfg.algos.iter().map(move |a| series_name(a, w))).collect();
    let mut sums = vec![vec![0.0; t_total]; names.len()];
    let mut counts = vec![vec![0usize; t_total]; names.len()];
    let mut outcomes = Vec::new();
    for trial in per_trial {
        for (s, (o, cols)) in trial.into_iter().enumerate() {
            for (t, v) in cols.into_iter().enumerate() {
                if v.is_finite() {
                    sums[s][t] += v;
                    counts[s][t] += 1;
                }
            }
            outcomes.push(o);
        }
    }
    let curves: Vec<(String, Vec<f64>)> = names
        .iter()
        .enumerate()
        .map(|(s, n)| {
            let c = (0..t_total).map(|t| if counts[s][t] > 0 { sums[s][t] / counts[s][t] as f64 } else { f64::NAN }).collect();
            (n.clone(), c)
        })
        .collect();

    let mut files = Vec::new();
    write_tables(cfg, &outcomes.iter().map(|o| o.record.clone()).collect::<Vec<_>>(), &mut files)?;
    let nmse_path = cfg.out_dir.join("fig3_nmse.csv");
    write_curves(&nmse_path, &curves)?;
    files.push(nmse_path.clone());
    let svg = fig3_svg(&nmse_path)?;
    write_text(cfg.out_dir.join("fig3.svg"), &svg, &mut files)?;
    Ok(RunSummary { outcomes, curves, files })
}

fn write_curves(path: &Path, curves: &[(String, Vec<f64>)]) -> HarnessResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(out_err)?;
    let mut header = vec!["column".to_string()];
    header.extend(curves.iter().map(|c| c.0.clone()));
    w.write_record(&header).map_err(out_err)?;
    let t_total = curves.first().map_or(0, |c| c.1.len());
    for t in 0..t_total {
        let mut row = vec![(t + 1).to_string()];
        row.extend(curves.iter().map(|c| c.1[t].to_string()));
        w.write_record(&row).map_err(out_err)?;
    }
    w.flush().map_err(out_err)
}

/// Render the per-column NMSE chart from its CSV.
pub fn fig3_svg(path: &Path) -> HarnessResult<String> {
    let mut rd = csv::Reader::from_path(path).map_err(out_err)?;
    let header: Vec<String> = rd.headers().map_err(out_err)?.iter().skip(1).map(String::from).collect();
    let mut series: Vec<Series> = header.into_iter().map(|label| Series { label, points: Vec::new() }).collect();
    for rec in rd.records() {
        let rec = rec.map_err(out_err)?;
        let t: f64 = rec[0].parse().map_err(|_| out_err(Error::Format("bad column index".into())))?;
        for (s, field) in series.iter_mut().zip(rec.iter().skip(1)) {
            let v: f64 = field.parse().map_err(|_| out_err(Error::Format(format!("bad value {field:?}"))))?;
            s.points.push((t, v));
        }
    }
    let chart = Chart { title: "per-column NMSE".into(), x_label: "column".into(), y_label: "mean NMSE".into(), y_range: None };
    Ok(line_chart(&chart, &series))
}

/// Dispatch on `cfg.experiment` (not `single`).
pub fn run_experiment(cfg: &ExperimentConfig) -> HarnessResult<RunSummary> {
    match cfg.experiment {
        Experiment::Fig1 => run_fig1(cfg),
        Experiment::Fig2 => run_fig2(cfg),
        Experiment::Fig3 => run_fig3(cfg),
        Experiment::Sweep => run_sweep(cfg),
        Experiment::Single => run_single(cfg).map(|s| RunSummary { files: s.files, ..RunSummary::default() }),
    }
}

/// Build the instance a `single` or `gen` run works on.
pub fn make_instance(cfg: &ExperimentConfig) -> HarnessResult<Instance> {
    if let Some(dir) = &cfg.instance_dir {
        return import_instance(dir).map_err(HarnessError::Config);
    }
    let (problem, truth, spec) = match &cfg.gen {
        GenConfig::Mmv(s) => {
            let (p, t) = gen_mmv_instance(s).map_err(HarnessError::Config)?;
            (p, t, serde_json::to_value(s))
        }
        GenConfig::Schedule(s) => {
            let (p, t) = gen_timevarying_instance(s).map_err(HarnessError::Config)?;
            (p, t, serde_json::to_value(s))
        }
    };
    Ok(Instance::new(problem, Some(truth), spec.map_err(out_err)?))
}

/// Export the configured instance to `cfg.out_dir`.
pub fn run_gen(cfg: &ExperimentConfig) -> HarnessResult<Instance> {
    let inst = make_instance(cfg)?;
    export_instance(&cfg.out_dir, &inst).map_err(out_err)?;
    Ok(inst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleSummary {
    pub algo: String,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub converged: bool,
    pub iterations: usize,
    pub lambda: f64,
    pub support: Vec<usize>,
    pub nmse: Option<f64>,
    pub failure: Option<bool>,
    pub runtime_ms: u64,
}

#[derive(Debug, Clone)]
pub struct SingleResult {
    pub estimate: SolutionEstimate,
    pub summary: SingleSummary,
    pub files: Vec<PathBuf>,
}

fn true_b_for(inst: &Instance) -> Option<DMatrix<f64>> {
    let beta = inst.meta.generator.get("corr_beta").and_then(Value::as_f64)?;
    Some(toeplitz_ar1(beta, inst.problem.l()))
}

/// Solve one instance with one algorithm and dump everything about the estimate.
pub fn run_single(cfg: &ExperimentConfig) -> HarnessResult<SingleResult> {
    let inst = make_instance(cfg)?;
    solve_instance(cfg, &inst)
}

pub fn solve_instance(cfg: &ExperimentConfig, inst: &Instance) -> HarnessResult<SingleResult> {
    let algo = cfg.algos.first().ok_or_else(|| config_err("no algorithm given"))?;
    let registry = Registry::builtin();
    let solver = registry.get(algo).map_err(HarnessError::Config)?;
    let ctx = SolveContext { true_b: true_b_for(inst), ..base_context(cfg) };
    let problem: &MmvProblem = &inst.problem;
    let t0 = Instant::now();
    let est = solver.solve(problem, &ctx).map_err(HarnessError::Solver)?;
    let runtime_ms = elapsed_ms(t0, cfg.record_runtime);

    let rule = if problem.lambda > 0.0 { FailureRule::NOISY } else { FailureRule::NOISELESS };
    let (err, failure) = match &inst.truth {
        Some(t) => (nmse(&est.x, &t.x_true).ok(), Some(trial_failure(&est.x, &t.x_true, rule))),
        None => (None, None),
    };
    let summary = SingleSummary {
        algo: algo.clone(),
        n: problem.n(),
        m: problem.m(),
        l: problem.l(),
        converged: est.converged,
        iterations: est.iterations,
        lambda: est.hyper.lambda,
        support: est.support.clone(),
        nmse: err,
        failure,
        runtime_ms,
    };

    fs::create_dir_all(&cfg.out_dir).map_err(out_err)?;
    let mut files = Vec::new();
    let d = &cfg.out_dir;
    let mut put = |name: &str, f: &dyn Fn(&Path) -> crate::Result<()>| -> HarnessResult<()> {
        let p = d.join(name);
        f(&p).map_err(out_err)?;
        files.push(p);
        Ok(())
    };
    put("x_hat.csv", &|p| write_matrix_csv(p, &est.x))?;
    put("gamma.csv", &|p| write_vector_csv(p, est.hyper.gamma.as_slice()))?;
    put("b.csv", &|p| write_matrix_csv(p, &est.hyper.b))?;
    put("cost_trace.csv", &|p| write_vector_csv(p, &est.cost_trace))?;
    let json = serde_json::to_string_pretty(&summary).map_err(out_err)? + "\n";
    put("summary.json", &|p| fs::write(p, &json).map_err(Error::from))?;
    Ok(SingleResult { estimate: est, summary, files })
}
