//! Sweeps of the gradient scaling factor `W` over temperature and negative
//! count, hardness-weight entropy, and CSV/JSON emission.
//!
//! `W` tends to 1 as the number of negatives grows and to `K / (K + 1)` as
//! the temperature grows. Whether it rises or falls with temperature is set
//! by the sign of `sum_j (s+ - s_j) exp(s_j / tau)`, which can change along
//! a sweep.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::{dw_dtau, hardness_weights, scaling_factor, softmax_probs};
use crate::rng::{self, Purpose};
use crate::stable::check_tau;
use crate::types::LogitsRow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Monotonicity {
    Increasing,
    Decreasing,
    Constant,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    /// Temperatures or negative counts.
    pub axis: Vec<f64>,
    pub w: Vec<f64>,
    /// `1 - W` computed as the positive's softmax probability, so it keeps
    /// full relative precision when `W` rounds to 1.
    pub one_minus_w: Vec<f64>,
    /// Closed form, filled where one exists.
    pub closed_form: Option<Vec<f64>>,
    pub bound: f64,
    /// `|W - bound|` at the last axis point.
    pub max_abs_gap_to_bound: f64,
    pub pattern: Monotonicity,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid[0] <= 0.0 || grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid);
    }
    Ok(())
}

fn pattern_of(values: &[f64]) -> Monotonicity {
    let up = values.windows(2).any(|w| w[1] > w[0]);
    let down = values.windows(2).any(|w| w[1] < w[0]);
    match (up, down) {
        (true, false) => Monotonicity::Increasing,
        (false, true) => Monotonicity::Decreasing,
        (false, false) => Monotonicity::Constant,
        (true, true) => Monotonicity::Mixed,
    }
}

/// Whether the row is the symmetric extreme case: positive at 1, every
/// negative at -1.
pub fn is_symmetric_scenario(row: &LogitsRow) -> bool {
    row.pos == 1.0 && row.negs.iter().all(|&s| s == -1.0)
}

/// `W` in the symmetric scenario: `K / (exp(2 / tau) + K)`.
pub fn symmetric_closed_form(k: usize, tau: f64) -> f64 {
    let k = k as f64;
    k / ((2.0 / tau).exp() + k)
}

/// `W` across a temperature grid, bound `K / (K + 1)`.
pub fn sweep_tau(row: &LogitsRow, tau_grid: &[f64]) -> Result<SweepResult> {
    check_grid(tau_grid)?;
    let mut w: Vec<f64> = Vec::with_capacity(tau_grid.len());
    let mut one_minus_w = Vec::with_capacity(tau_grid.len());
    for &tau in tau_grid {
        let (p_pos, p_neg) = softmax_probs(row, tau)?;
        w.push(p_neg.iter().sum());
        one_minus_w.push(p_pos);
    }
    let k = row.k();
    let bound = k as f64 / (k as f64 + 1.0);
    let closed_form = is_symmetric_scenario(row)
        .then(|| tau_grid.iter().map(|&t| symmetric_closed_form(k, t)).collect());
    Ok(SweepResult {
        axis: tau_grid.to_vec(),
        max_abs_gap_to_bound: (w[w.len() - 1] - bound).abs(),
        pattern: pattern_of(&w),
        w,
        one_minus_w,
        closed_form,
        bound,
    })
}

/// `W` for rows holding `K` copies of one negative similarity, for each
/// `K` in the grid. Bound 1.
pub fn sweep_k(pos: f64, neg: f64, tau: f64, k_grid: &[usize]) -> Result<SweepResult> {
    check_tau(tau)?;
    if k_grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if k_grid[0] == 0 || k_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid);
    }
    let mut w: Vec<f64> = Vec::with_capacity(k_grid.len());
    let mut one_minus_w = Vec::with_capacity(k_grid.len());
    let mut closed = Vec::with_capacity(k_grid.len());
    for &k in k_grid {
        let row = LogitsRow::repeated(pos, neg, k)?;
        let (p_pos, p_neg) = softmax_probs(&row, tau)?;
        w.push(p_neg.iter().sum());
        one_minus_w.push(p_pos);
        closed.push(k as f64 / (k as f64 + ((pos - neg) / tau).exp()));
    }
    Ok(SweepResult {
        axis: k_grid.iter().map(|&k| k as f64).collect(),
        max_abs_gap_to_bound: 1.0 - w[w.len() - 1],
        pattern: pattern_of(&w),
        w,
        one_minus_w,
        closed_form: Some(closed),
        bound: 1.0,
    })
}

/// Shannon entropy (nats) of the hardness weights, in `[0, ln K]`.
pub fn weight_entropy(row: &LogitsRow, tau: f64) -> Result<f64> {
    let p = hardness_weights(row, tau)?;
    Ok(-p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>())
}

/// Ratio of the hardness weights of two negatives, `exp((s_a - s_b) / tau)`.
pub fn penalty_ratio(s_a: f64, s_b: f64, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(((s_a - s_b) / tau).exp())
}

/// `points` log-spaced values from `min` to `max` inclusive.
pub fn log_grid(min: f64, max: f64, points: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min) || points < 2 {
        return Err(Error::InvalidGrid);
    }
    let (lo, hi) = (min.ln(), max.ln());
    let step = (hi - lo) / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| (lo + step * i as f64).exp()).collect();
    // pin the endpoints exactly
    grid[0] = min;
    grid[points - 1] = max;
    Ok(grid)
}

/// `1, 2, 4, ..., 2^max_pow`.
pub fn pow2_grid(max_pow: u32) -> Vec<usize> {
    (0..=max_pow).map(|p| 1usize << p).collect()
}

/// 17 significant digits, the precision that round-trips an `f64`.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// CSV with header `axis,W,closed_form,bound`, LF line endings.
pub fn sweep_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("axis,W,closed_form,bound\n");
    for (i, (a, w)) in sweep.axis.iter().zip(&sweep.w).enumerate() {
        let closed = sweep
            .closed_form
            .as_ref()
            .map(|c| fmt17(c[i]))
            .unwrap_or_default();
        writeln!(out, "{},{},{},{}", fmt17(*a), fmt17(*w), closed, fmt17(sweep.bound))
            .expect("writing to a String");
    }
    out
}

/// CSV with header `axis,entropy,max_entropy` over a temperature grid.
pub fn entropy_csv(row: &LogitsRow, tau_grid: &[f64]) -> Result<String> {
    check_grid(tau_grid)?;
    let max_entropy = (row.k() as f64).ln();
    let mut out = String::from("axis,entropy,max_entropy\n");
    for &tau in tau_grid {
        let h = weight_entropy(row, tau)?;
        writeln!(out, "{},{},{}", fmt17(tau), fmt17(h), fmt17(max_entropy))
            .expect("writing to a String");
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
}

/// One named check with its worst observed violation metric.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssertionOutcome {
    pub assertion: String,
    pub status: Status,
    pub worst_gap: f64,
}

impl AssertionOutcome {
    pub fn new(assertion: impl Into<String>, passed: bool, worst_gap: f64) -> Self {
        Self {
            assertion: assertion.into(),
            status: if passed { Status::Pass } else { Status::Fail },
            worst_gap,
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PropositionConfig {
    pub seed: u64,
    /// Random rows for the temperature-limit and sign checks.
    pub random_rows: usize,
    /// Negative counts cycled through by the random rows.
    pub ks: Vec<usize>,
    /// Log-spaced temperature grid, endpoints inclusive.
    pub tau_min: f64,
    pub tau_max: f64,
    pub tau_points: usize,
    /// Temperatures at which `W` is swept over `K`.
    pub k_sweep_taus: Vec<f64>,
    /// Negative counts `2^0 .. 2^k_max_pow2`.
    pub k_max_pow2: u32,
}

impl Default for PropositionConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            random_rows: 50,
            ks: vec![1, 4, 64],
            tau_min: 0.01,
            tau_max: 1e4,
            tau_points: 33,
            k_sweep_taus: vec![0.07, 0.1, 0.5, 1.0],
            k_max_pow2: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropositionReport {
    pub assertions: Vec<AssertionOutcome>,
}

impl PropositionReport {
    pub fn all_passed(&self) -> bool {
        self.assertions.iter().all(AssertionOutcome::passed)
    }
}

/// Random row with similarities uniform in `[-1, 1]`.
pub fn random_row<R: Rng>(rng: &mut R, k: usize) -> LogitsRow {
    let pos = rng.random_range(-1.0..=1.0);
    let negs = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
    LogitsRow::unchecked(pos, negs)
}

/// Sign of `sum_j (s+ - s_j) E_j`, computed from max-shifted exponentials.
fn reference_sign(row: &LogitsRow, tau: f64) -> f64 {
    let max = row.negs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row
        .negs
        .iter()
        .map(|&s| (row.pos - s) * ((s - max) / tau).exp())
        .sum();
    sign(sum)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs the limit and monotonicity checks for `W` on seeded random rows
/// plus the fixed reference and adversarial cases.
pub fn proposition_report(cfg: &PropositionConfig) -> Result<PropositionReport> {
    if cfg.ks.is_empty() || cfg.random_rows == 0 || cfg.k_sweep_taus.is_empty() {
        return Err(Error::InvalidConfig("proposition config has an empty list".into()));
    }
    let tau_grid = log_grid(cfg.tau_min, cfg.tau_max, cfg.tau_points)?;
    let k_grid = pow2_grid(cfg.k_max_pow2);
    let mut rng = rng::stream(cfg.seed, Purpose::Analysis, 0);
    let rows: Vec<LogitsRow> = (0..cfg.random_rows)
        .map(|i| random_row(&mut rng, cfg.ks[i % cfg.ks.len()]))
        .collect();
    let mut out = Vec::new();

    let w_ref = scaling_factor(&LogitsRow::repeated(0.9, 0.0, 1_000_000)?, 0.1)?;
    let gap = (w_ref - 0.99196).abs();
    out.push(AssertionOutcome::new("k_limit_reference_w", gap < 1e-4, gap));

    // 1 - W strictly decreasing in K, for the reference pair and the
    // adversarial pair. Rows reach 2^k_max_pow2 entries, so random pairs
    // are left to the temperature checks.
    let mut monotone = true;
    let mut worst_residual: f64 = 0.0;
    for &tau in &cfg.k_sweep_taus {
        for (pos, neg) in [(0.9, 0.0), (1.0, -1.0)] {
            let sweep = sweep_k(pos, neg, tau, &k_grid)?;
            monotone &= sweep.one_minus_w.windows(2).all(|w| w[1] < w[0]);
            worst_residual = worst_residual.max(sweep.max_abs_gap_to_bound);
        }
    }
    out.push(AssertionOutcome::new("k_limit_monotone", monotone, worst_residual));

    let mut worst_tau_gap: f64 = 0.0;
    for row in &rows {
        worst_tau_gap = worst_tau_gap.max(sweep_tau(row, &tau_grid)?.max_abs_gap_to_bound);
    }
    out.push(AssertionOutcome::new("tau_limit_bound", worst_tau_gap < 1e-3, worst_tau_gap));

    let mut mismatches = 0usize;
    for row in &rows {
        for &tau in &tau_grid {
            if sign(dw_dtau(row, tau)?) != reference_sign(row, tau) {
                mismatches += 1;
            }
        }
    }
    out.push(AssertionOutcome::new(
        "dw_dtau_sign",
        mismatches == 0,
        mismatches as f64,
    ));

    let mut worst_closed: f64 = 0.0;
    for &k in &cfg.ks {
        let sweep = sweep_tau(&LogitsRow::repeated(1.0, -1.0, k)?, &tau_grid)?;
        let closed = sweep.closed_form.as_ref().expect("symmetric scenario");
        for (w, c) in sweep.w.iter().zip(closed) {
            worst_closed = worst_closed.max((w - c).abs());
        }
    }
    out.push(AssertionOutcome::new(
        "symmetric_closed_form",
        worst_closed <= 1e-12,
        worst_closed,
    ));

    Ok(PropositionReport { assertions: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(pos: f64, negs: &[f64]) -> LogitsRow {
        LogitsRow::new(pos, negs.to_vec()).unwrap()
    }

    #[test]
    fn tau_sweep_symmetric_values() {
        let s = sweep_tau(&row(1.0, &[-1.0; 4]), &[0.2, 1.0, 10.0, 1e4]).unwrap();
        // 4 / (e^{2/tau} + 4), 40-digit references
        let expected = [
            1.815_667_465_797_717e-4,
            0.351_214_355_716_060_7,
            0.766_077_658_680_644,
            0.799_967_998_079_991_5,
        ];
        for (w, e) in s.w.iter().zip(expected) {
            assert!((w - e).abs() < 1e-12, "{w} vs {e}");
        }
        assert!(s.max_abs_gap_to_bound < 1e-3);
        assert_eq!(s.bound, 0.8);
        assert_eq!(s.pattern, Monotonicity::Increasing);
        let closed = s.closed_form.unwrap();
        for (w, c) in s.w.iter().zip(closed) {
            assert!((w - c).abs() <= 1e-12);
        }
    }

    #[test]
    fn tau_sweep_uniform_is_flat() {
        let s = sweep_tau(&row(0.2, &[0.2; 5]), &log_grid(0.01, 100.0, 9).unwrap()).unwrap();
        assert!(s.w.iter().all(|w| (w - 5.0 / 6.0).abs() < 1e-15));
        assert!(s.closed_form.is_none());
    }

    #[test]
    fn sweep_errors() {
        let r = row(0.1, &[0.0]);
        assert!(matches!(sweep_tau(&r, &[]), Err(Error::EmptyGrid)));
        assert!(matches!(sweep_tau(&r, &[1.0, 0.5]), Err(Error::InvalidGrid)));
        assert!(matches!(sweep_tau(&r, &[0.0, 0.5]), Err(Error::InvalidGrid)));
        assert!(matches!(sweep_k(0.1, 0.0, 0.0, &[1]), Err(Error::NonPositiveTau(_))));
        assert!(matches!(sweep_k(0.1, 0.0, 1.0, &[]), Err(Error::EmptyGrid)));
        assert!(matches!(sweep_k(0.1, 0.0, 1.0, &[2, 2]), Err(Error::InvalidGrid)));
    }

    #[test]
    fn k_sweep_values() {
        let s = sweep_k(0.9, 0.0, 0.1, &[1_000_000]).unwrap();
        // 1e6 / (1e6 + e^9) = 0.99196204826989942...
        assert!((s.w[0] - 0.991_962_048_269_899_4).abs() < 1e-10);
        let s = sweep_k(1.0, -1.0, 1.0, &[1, 4]).unwrap();
        assert!((s.w[0] - 0.119_202_922_022_117_56).abs() < 1e-12);
        assert!((s.w[1] - 0.351_214_355_716_060_7).abs() < 1e-12);
        let s = sweep_k(0.3, -0.6, 0.2, &pow2_grid(12)).unwrap();
        assert_eq!(s.pattern, Monotonicity::Increasing);
        assert!(s.w.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn entropy_examples() {
        let h = weight_entropy(&row(0.0, &[0.3, 0.3]), 0.1).unwrap();
        assert!((h - 2f64.ln()).abs() < 1e-9);
        assert_eq!(weight_entropy(&row(0.0, &[0.7]), 0.2).unwrap(), 0.0);
        let r = row(0.0, &[0.4, 0.2]);
        let cold = weight_entropy(&r, 0.1).unwrap();
        let warm = weight_entropy(&r, 1.0).unwrap();
        assert!((cold - 0.365_333_855_087_207_6).abs() < 1e-12);
        assert!((warm - 0.688_172_069_919_096_3).abs() < 1e-12);
    }

    #[test]
    fn penalty_ratio_examples() {
        assert_eq!(penalty_ratio(0.3, 0.3, 0.1).unwrap(), 1.0);
        assert!((penalty_ratio(0.4, 0.2, 0.1).unwrap() - 7.389_056).abs() < 1e-6);
        assert!((penalty_ratio(0.4, 0.2, 10.0).unwrap() - 1.020_201).abs() < 1e-6);
        assert!(penalty_ratio(0.4, 0.2, 0.0).is_err());
    }

    #[test]
    fn grids() {
        let g = log_grid(0.01, 1e4, 33).unwrap();
        assert_eq!(g.len(), 33);
        assert_eq!((g[0], g[32]), (0.01, 1e4));
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert!((g[16] - 10.0).abs() < 1e-12);
        assert_eq!(pow2_grid(3), vec![1, 2, 4, 8]);
    }

    #[test]
    fn csv_format() {
        let s = sweep_tau(&row(1.0, &[-1.0; 4]), &[1.0]).unwrap();
        let csv = sweep_csv(&s);
        let mut lines = csv.split('\n');
        assert_eq!(lines.next(), Some("axis,W,closed_form,bound"));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "1.0000000000000000e0");
        assert_eq!(fields[3], "8.0000000000000004e-1");
        assert_eq!(fields[1].parse::<f64>().unwrap(), s.w[0]);
        assert!((fields[2].parse::<f64>().unwrap() - 0.351_214_355_716_060_7).abs() < 1e-15);
        assert_eq!(lines.next(), Some(""));
        assert!(!csv.contains('\r'));
        let open = sweep_csv(&sweep_tau(&row(0.5, &[0.0]), &[1.0]).unwrap());
        assert!(open.lines().nth(1).unwrap().contains(",,"));
    }

    #[test]
    fn proposition_report_default_passes() {
        let report = proposition_report(&PropositionConfig::default()).unwrap();
        for a in &report.assertions {
            assert!(a.passed(), "{a:?}");
        }
        assert_eq!(report.assertions.len(), 5);
        let json = serde_json::to_value(&report.assertions[0]).unwrap();
        assert_eq!(json["status"], "pass");
        assert!(json.get("worst_gap").is_some());
    }
}
