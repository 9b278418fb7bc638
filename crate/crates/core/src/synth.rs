//! Seeded synthetic data: Gaussian dictionaries, AR(1)-correlated row
//! signals, time-varying support schedules and SNR-calibrated noise.
//!
//! Every generator is a pure function of its spec and seed.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::MmvProblem;

pub type SynthRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SynthRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit seed from a master seed and a path of labels.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    let out = h.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&out[..8]);
    u64::from_le_bytes(buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RowAmp {
    /// No extra scaling.
    #[default]
    UnitGauss,
    /// Each row scaled by a draw from U(1, 3).
    Uniform13,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmvGenSpec {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
    /// AR(1) coefficient of each nonzero row.
    pub corr_beta: f64,
    /// `None` = noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub row_amp: RowAmp,
    pub seed: u64,
}

impl MmvGenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.l == 0 {
            return Err(Error::InvalidOption("n, m and l must be >= 1".into()));
        }
        if self.k > self.m || self.n > self.m {
            return Err(Error::InvalidOption(format!(
                "need k <= m and n <= m (n = {}, m = {}, k = {})",
                self.n, self.m, self.k
            )));
        }
        if !(0.0..=0.999).contains(&self.corr_beta) {
            return Err(Error::InvalidOption(format!("corr_beta {} outside [0, 0.999]", self.corr_beta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub x_true: DMatrix<f64>,
    pub support_per_column: Vec<Vec<usize>>,
    pub beta_per_row: Vec<f64>,
    /// Per-entry variance of the added noise (0 when noiseless).
    pub noise_var: f64,
}

impl GroundTruth {
    pub fn from_x(x_true: DMatrix<f64>, beta_per_row: Vec<f64>, noise_var: f64) -> Self {
        let support_per_column = x_true
            .column_iter()
            .map(|c| c.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect())
            .collect();
        Self { x_true, support_per_column, beta_per_row, noise_var }
    }

    /// Rows that are nonzero in any column.
    pub fn row_support(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.support_per_column.iter().flatten().copied().collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }
}

/// i.i.d. standard normal entries, columns scaled to unit norm.
pub fn gen_dictionary<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> DMatrix<f64> {
    let mut phi = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut col in phi.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    phi
}

/// `k` rows of length `l`, each a stationary AR(1) sequence with coefficient
/// `beta` and unit marginal variance (row covariance `β^{|a−b|}`).
pub fn gen_correlated_rows<R: Rng + ?Sized>(k: usize, l: usize, beta: f64, rng: &mut R) -> DMatrix<f64> {
    assert!(beta.abs() < 1.0, "AR(1) coefficient must satisfy |beta| < 1");
    let innov = (1.0 - beta * beta).sqrt();
    let mut x = DMatrix::zeros(k, l);
    for r in 0..k {
        ar1_fill(&mut x, r, 0..l, beta, innov, rng);
    }
    x
}

fn ar1_fill<R: Rng + ?Sized>(
    x: &mut DMatrix<f64>,
    row: usize,
    cols: std::ops::Range<usize>,
    beta: f64,
    innov: f64,
    rng: &mut R,
) {
    let mut prev = 0.0;
    for (step, t) in cols.enumerate() {
        let e: f64 = rng.sample(StandardNormal);
        prev = if step == 0 { e } else { beta * prev + innov * e };
        x[(row, t)] = prev;
    }
}

fn amplitude<R: Rng + ?Sized>(amp: RowAmp, rng: &mut R) -> f64 {
    match amp {
        RowAmp::UnitGauss => 1.0,
        RowAmp::Uniform13 => rng.random_range(1.0..3.0),
    }
}

/// Add Gaussian noise scaled so that `10·log10(‖Y‖²/‖V‖²)` equals `snr_db`
/// exactly. Returns the noisy matrix and the implied per-entry variance.
/// An infinite `snr_db` returns the input unchanged.
pub fn add_noise_snr<R: Rng + ?Sized>(y_clean: &DMatrix<f64>, snr_db: f64, rng: &mut R) -> Result<(DMatrix<f64>, f64)> {
    if snr_db == f64::INFINITY {
        return Ok((y_clean.clone(), 0.0));
    }
    let signal = y_clean.norm_squared();
    if signal == 0.0 {
        return Err(Error::DegenerateReference);
    }
    let raw = DMatrix::from_fn(y_clean.nrows(), y_clean.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
    let target = signal / 10f64.powf(snr_db / 10.0);
    let noise = &raw * (target / raw.norm_squared()).sqrt();
    let var = target / y_clean.len() as f64;
    Ok((y_clean + noise, var))
}

/// Realized SNR in dB.
pub fn snr_db(clean: &DMatrix<f64>, noisy: &DMatrix<f64>) -> f64 {
    10.0 * (clean.norm_squared() / (noisy - clean).norm_squared()).log10()
}

/// Draw one MMV instance. Draw order: dictionary, support, rows, amplitudes,
/// noise. Noiseless instances carry `lambda = 0`; noisy ones the noise variance.
pub fn gen_mmv_instance(spec: &MmvGenSpec) -> Result<(MmvProblem, GroundTruth)> {
    spec.validate()?;
    let mut rng = rng_from_seed(spec.seed);
    let phi = gen_dictionary(spec.n, spec.m, &mut rng);
    let mut support: Vec<usize> = sample(&mut rng, spec.m, spec.k).into_vec();
    support.sort_unstable();
    let rows = gen_correlated_rows(spec.k, spec.l, spec.corr_beta, &mut rng);
    let mut x = DMatrix::zeros(spec.m, spec.l);
    let mut betas = vec![0.0; spec.m];
    for (r, &i) in support.iter().enumerate() {
        let a = amplitude(spec.row_amp, &mut rng);
        x.set_row(i, &(rows.row(r) * a));
        betas[i] = spec.corr_beta;
    }
    let clean = &phi * &x;
    let (y, noise_var) = match spec.snr_db {
        Some(snr) if spec.k > 0 => add_noise_snr(&clean, snr, &mut rng)?,
        _ => (clean, 0.0),
    };
    let problem = MmvProblem::new(phi, y, noise_var)?;
    Ok((problem, GroundTruth::from_x(x, betas, noise_var)))
}

/// A support change at a given (0-based) column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub column: usize,
    pub rows_added: usize,
    pub rows_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub n: usize,
    pub m: usize,
    pub t_total: usize,
    pub events: Vec<ScheduleEvent>,
    /// Columns a row stays active after it is added (unless removed).
    pub row_duration: usize,
    /// Range of the per-row AR(1) coefficient.
    pub corr_range: (f64, f64),
    pub snr_db: Option<f64>,
    pub seed: u64,
}

impl ScheduleSpec {
    /// 60×256 dictionary, 50 columns: 15 rows from the start, +10 at columns
    /// 16 and 31, 5 rows zeroed from column 26, 20-column row lifetime,
    /// per-row correlation in [0.7, 0.99], 20 dB SNR. Columns are 0-based here.
    pub fn time_varying_default(seed: u64) -> Self {
        Self {
            n: 60,
            m: 256,
            t_total: 50,
            events: vec![
                ScheduleEvent { column: 0, rows_added: 15, rows_removed: 0 },
                ScheduleEvent { column: 15, rows_added: 10, rows_removed: 0 },
                ScheduleEvent { column: 25, rows_added: 0, rows_removed: 5 },
                ScheduleEvent { column: 30, rows_added: 10, rows_removed: 0 },
            ],
            row_duration: 20,
            corr_range: (0.7, 0.99),
            snr_db: Some(20.0),
            seed,
        }
    }
}

/// Lifetime of one nonzero row: active on `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowSpan {
    pub row: usize,
    pub start: usize,
    pub end: usize,
}

/// Resolve a schedule into row lifetimes. New rows come from indices that
/// are inactive at the event column; removals hit the rows that have been
/// active longest (earliest start, then lowest index).
pub fn resolve_schedule<R: Rng + ?Sized>(spec: &ScheduleSpec, rng: &mut R) -> Result<Vec<RowSpan>> {
    if spec.row_duration == 0 || spec.t_total == 0 {
        return Err(Error::InvalidSchedule("row_duration and t_total must be >= 1".into()));
    }
    if spec.events.windows(2).any(|w| w[0].column > w[1].column) {
        return Err(Error::InvalidSchedule("events must be sorted by column".into()));
    }
    let mut spans: Vec<RowSpan> = Vec::new();
    for ev in &spec.events {
        if ev.column >= spec.t_total {
            return Err(Error::InvalidSchedule(format!("event column {} beyond t_total", ev.column)));
        }
        let c = ev.column;
        let mut active: Vec<usize> = (0..spans.len()).filter(|&s| spans[s].start <= c && c < spans[s].end).collect();
        if ev.rows_removed > active.len() {
            return Err(Error::InvalidSchedule(format!(
                "column {c}: removing {} rows but only {} active",
                ev.rows_removed,
                active.len()
            )));
        }
        active.sort_by_key(|&s| (spans[s].start, spans[s].row));
        for &s in active.iter().take(ev.rows_removed) {
            spans[s].end = c;
        }

        let busy: Vec<bool> = {
            let mut b = vec![false; spec.m];
            for s in spans.iter().filter(|s| s.start <= c && c < s.end) {
                b[s.row] = true;
            }
            b
        };
        let free: Vec<usize> = (0..spec.m).filter(|&i| !busy[i]).collect();
        if ev.rows_added > free.len() {
            return Err(Error::InvalidSchedule(format!("column {c}: not enough inactive rows")));
        }
        let mut picked: Vec<usize> = sample(rng, free.len(), ev.rows_added).into_iter().map(|j| free[j]).collect();
        picked.sort_unstable();
        for row in picked {
            spans.push(RowSpan { row, start: c, end: (c + spec.row_duration).min(spec.t_total) });
        }
    }
    Ok(spans)
}

/// Number of active rows in each column.
pub fn active_counts(spans: &[RowSpan], t_total: usize) -> Vec<usize> {
    (0..t_total).map(|t| spans.iter().filter(|s| s.start <= t && t < s.end).count()).collect()
}

/// Draw a time-varying instance: dictionary, schedule, per-row AR(1)
/// signals over each row's lifetime, then noise. Returns the problem with
/// `L = t_total` and `lambda` equal to the noise variance.
pub fn gen_timevarying_instance(spec: &ScheduleSpec) -> Result<(MmvProblem, GroundTruth)> {
    if spec.n == 0 || spec.m == 0 {
        return Err(Error::InvalidSchedule("n and m must be >= 1".into()));
    }
    let (lo, hi) = spec.corr_range;
    if !(0.0 <= lo && lo <= hi && hi < 1.0) {
        return Err(Error::InvalidSchedule(format!("corr_range ({lo}, {hi}) invalid")));
    }
    let mut rng = rng_from_seed(spec.seed);
    let phi = gen_dictionary(spec.n, spec.m, &mut rng);
    let spans = resolve_schedule(spec, &mut rng)?;
    let mut x = DMatrix::zeros(spec.m, spec.t_total);
    let mut betas = vec![0.0; spec.m];
    for span in &spans {
        let beta = if hi > lo { rng.random_range(lo..hi) } else { lo };
        betas[span.row] = beta;
        ar1_fill(&mut x, span.row, span.start..span.end, beta, (1.0 - beta * beta).sqrt(), &mut rng);
    }
    let clean = &phi * &x;
    let (y, noise_var) = match spec.snr_db {
        Some(snr) if clean.norm_squared() > 0.0 => add_noise_snr(&clean, snr, &mut rng)?,
        _ => (clean, 0.0),
    };
    let problem = MmvProblem::new(phi, y, noise_var)?;
    Ok((problem, GroundTruth::from_x(x, betas, noise_var)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1_spec(seed: u64) -> MmvGenSpec {
        MmvGenSpec { n: 25, m: 125, k: 12, l: 4, corr_beta: 0.9, snr_db: None, row_amp: RowAmp::UnitGauss, seed }
    }

    #[test]
    fn dictionary_columns_unit_norm() {
        let phi = gen_dictionary(25, 125, &mut rng_from_seed(1));
        assert_eq!(phi.shape(), (25, 125));
        for c in phi.column_iter() {
            assert!((c.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dictionary_determinism() {
        let a = gen_dictionary(5, 9, &mut rng_from_seed(7));
        let b = gen_dictionary(5, 9, &mut rng_from_seed(7));
        let c = gen_dictionary(5, 9, &mut rng_from_seed(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn lag1_corr(x: &DMatrix<f64>) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for r in x.row_iter() {
            for t in 0..r.len() - 1 {
                num += r[t] * r[t + 1];
            }
            for t in 0..r.len() {
                den += r[t] * r[t];
            }
        }
        let l = x.ncols() as f64;
        (num / (l - 1.0)) / (den / l)
    }

    #[test]
    fn rows_independent_at_zero_beta() {
        let x = gen_correlated_rows(10_000, 4, 0.0, &mut rng_from_seed(2));
        assert!(lag1_corr(&x).abs() < 0.1);
        let var = x.norm_squared() / x.len() as f64;
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn rows_lag1_matches_beta() {
        let x = gen_correlated_rows(10_000, 4, 0.9, &mut rng_from_seed(3));
        let rho = lag1_corr(&x);
        assert!((0.85..=0.95).contains(&rho), "lag-1 {rho}");
        let var = x.norm_squared() / x.len() as f64;
        assert!((0.95..=1.05).contains(&var), "variance {var}");
    }

    #[test]
    fn row_covariance_converges_to_toeplitz() {
        let target = crate::linalg::toeplitz_ar1(0.9, 4);
        let err = |n: usize| {
            let x = gen_correlated_rows(n, 4, 0.9, &mut rng_from_seed(4));
            (x.tr_mul(&x) / n as f64 - &target).norm()
        };
        let (coarse, fine) = (err(1_000), err(40_000));
        // expected Frobenius error is about sqrt(28.5 / n)
        assert!(fine < 0.05, "Frobenius error {fine}");
        assert!(fine < coarse, "{fine} !< {coarse}");
    }

    #[test]
    fn instance_basics() {
        let (p, gt) = gen_mmv_instance(&fig1_spec(5)).unwrap();
        assert_eq!(p.phi.shape(), (25, 125));
        assert_eq!(p.y.shape(), (25, 4));
        assert_eq!(p.lambda, 0.0);
        assert_eq!(gt.row_support().len(), 12);
        assert_eq!((&p.y - &p.phi * &gt.x_true).norm(), 0.0);
        let (p2, gt2) = gen_mmv_instance(&fig1_spec(5)).unwrap();
        assert_eq!(p, p2);
        assert_eq!(gt, gt2);
    }

    #[test]
    fn dense_support_boundary() {
        let spec = MmvGenSpec { n: 4, m: 6, k: 6, l: 2, corr_beta: 0.5, snr_db: None, row_amp: RowAmp::Uniform13, seed: 1 };
        let (_, gt) = gen_mmv_instance(&spec).unwrap();
        assert_eq!(gt.row_support(), (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn spec_validation() {
        let mut s = fig1_spec(0);
        s.k = 200;
        assert!(gen_mmv_instance(&s).is_err());
        let mut s = fig1_spec(0);
        s.corr_beta = 1.0;
        assert!(gen_mmv_instance(&s).is_err());
    }

    #[test]
    fn snr_exact() {
        let mut rng = rng_from_seed(6);
        let y = DMatrix::from_fn(10, 3, |i, j| (i as f64 - 4.0) * 0.3 + j as f64);
        for target in [0.0, 10.0, 20.0, 35.5] {
            let (noisy, var) = add_noise_snr(&y, target, &mut rng).unwrap();
            assert!((snr_db(&y, &noisy) - target).abs() < 1e-9);
            assert!((var - (&noisy - &y).norm_squared() / 30.0).abs() < 1e-12 * var);
        }
        let (same, var) = add_noise_snr(&y, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(same, y);
        assert_eq!(var, 0.0);
        assert_eq!(add_noise_snr(&DMatrix::zeros(2, 2), 20.0, &mut rng), Err(Error::DegenerateReference));
    }

    #[test]
    fn default_schedule_counts() {
        // hand-simulated: 15 rows live on columns 1-20, +10 on 16-35, 5 of
        // those zeroed from 26, +10 on 31-50 (1-based)
        let mut want = vec![15; 15];
        want.extend([25; 5]);
        want.extend([10; 5]);
        want.extend([5; 5]);
        want.extend([15; 5]);
        want.extend([10; 15]);
        let spec = ScheduleSpec::time_varying_default(11);
        let spans = resolve_schedule(&spec, &mut rng_from_seed(11)).unwrap();
        assert_eq!(active_counts(&spans, 50), want);

        let (p, gt) = gen_timevarying_instance(&spec).unwrap();
        assert_eq!(p.y.shape(), (60, 50));
        let counts: Vec<usize> = gt.support_per_column.iter().map(|s| s.len()).collect();
        assert_eq!(counts, want);
        assert!(gt.beta_per_row.iter().filter(|&&b| b > 0.0).all(|&b| (0.7..0.99).contains(&b)));
        let clean = &p.phi * &gt.x_true;
        assert!((snr_db(&clean, &p.y) - 20.0).abs() < 0.5);
        assert!((p.lambda - gt.noise_var).abs() == 0.0);
    }

    #[test]
    fn schedule_without_events_is_plain_mmv() {
        let spec = ScheduleSpec {
            n: 10,
            m: 30,
            t_total: 6,
            events: vec![ScheduleEvent { column: 0, rows_added: 4, rows_removed: 0 }],
            row_duration: 10,
            corr_range: (0.9, 0.9),
            snr_db: None,
            seed: 3,
        };
        let (p, gt) = gen_timevarying_instance(&spec).unwrap();
        assert_eq!(p.l(), 6);
        let first = &gt.support_per_column[0];
        assert_eq!(first.len(), 4);
        assert!(gt.support_per_column.iter().all(|s| s == first));
    }

    #[test]
    fn schedule_rejects_over_removal() {
        let mut spec = ScheduleSpec::time_varying_default(1);
        spec.events[2].rows_removed = 40;
        assert!(matches!(gen_timevarying_instance(&spec), Err(Error::InvalidSchedule(_))));
    }

    #[test]
    fn derived_seeds_stable_and_distinct() {
        let a = derive_seed(42, &["fig1", "beta=0.9", "L=4", "3"]);
        assert_eq!(a, derive_seed(42, &["fig1", "beta=0.9", "L=4", "3"]));
        assert_ne!(a, derive_seed(42, &["fig1", "beta=0.9", "L=4", "4"]));
        assert_ne!(a, derive_seed(43, &["fig1", "beta=0.9", "L=4", "3"]));
        // label boundaries matter
        assert_ne!(derive_seed(1, &["ab", "c"]), derive_seed(1, &["a", "bc"]));
    }
}
