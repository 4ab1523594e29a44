//! Verification suites: the finite-difference gradient oracle, exact
//! identities, monotonicity checks, the limit behavior of `W` and the
//! symmetric-scenario closed form.
//!
//! Every suite draws its inputs from seeded streams, so a report is a pure
//! function of its [`VerifyConfig`].

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    log_grid, penalty_ratio, proposition_report, random_row, sweep_tau, symmetric_closed_form, weight_entropy,
    AssertionOutcome, PropositionConfig,
};
use crate::error::{Error, Result};
use crate::gradients::{
    analytic_gradients, compare_gradients, finite_difference, flatten_inputs, flatten_report, hardness_weights,
    row_from_flat, scaling_factor, softmax_probs, FiniteDiffConfig, GradientAgreement,
};
use crate::losses::{batch_value, dcl_value, infonce_value, reweight_factor};
use crate::rng::{self, Purpose};
use crate::temperature::{adaptive_temperature, alignment_loss, alignment_magnitude};
use crate::types::{LogitsRow, LossSpec, LossVariant, TemperatureConfig, UnitEmbeddingBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    /// Central-difference half step of the gradient oracle.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub dims: Vec<usize>,
    pub ks: Vec<usize>,
    pub taus: Vec<f64>,
    /// Random draws per `(m, K, tau, loss)` grid cell.
    pub draws_per_cell: usize,
    pub identity_rows: usize,
    /// Tolerance of the exact identities.
    pub identity_tol: f64,
    pub monotonic_configs: usize,
    pub entropy_rows: usize,
    pub propositions: PropositionConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
            dims: vec![2, 8, 64],
            ks: vec![1, 4, 64],
            taus: vec![0.07, 0.1, 0.5, 1.0],
            draws_per_cell: 1,
            identity_rows: 1000,
            identity_tol: 1e-12,
            monotonic_configs: 100,
            entropy_rows: 100,
            propositions: PropositionConfig::default(),
        }
    }
}

impl VerifyConfig {
    pub fn finite_diff(&self) -> FiniteDiffConfig {
        FiniteDiffConfig {
            step: self.step,
            rel_tol: self.rel_tol,
            abs_tol: self.abs_tol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.finite_diff().validate()?;
        if self.dims.iter().any(|&m| m < 2) || self.ks.contains(&0) || self.taus.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::InvalidConfig(
                "gradient grid needs m >= 2, K >= 1 and tau > 0".into(),
            ));
        }
        if self.dims.is_empty() || self.ks.is_empty() || self.taus.is_empty() || self.draws_per_cell == 0 {
            return Err(Error::InvalidConfig("gradient grid is empty".into()));
        }
        if self.identity_rows == 0 || self.monotonic_configs == 0 || self.entropy_rows == 0 {
            return Err(Error::InvalidConfig("suite sizes must be positive".into()));
        }
        if !(self.identity_tol > 0.0) {
            return Err(Error::InvalidConfig("identity_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    /// Number of random cases the suite evaluated.
    pub cases: usize,
    pub assertions: Vec<AssertionOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(AssertionOutcome::passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub suites: Vec<SuiteReport>,
    pub all_passed: bool,
}

impl VerifyReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.suite == name)
    }
}

pub fn run_all(cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let suites = vec![
        gradient_suite(cfg)?,
        identity_suite(cfg)?,
        monotonicity_suite(cfg)?,
        proposition_suite(cfg)?,
        symmetric_suite(cfg)?,
    ];
    let all_passed = suites.iter().all(SuiteReport::passed);
    Ok(VerifyReport {
        config: cfg.clone(),
        suites,
        all_passed,
    })
}

/// The loss specs checked by the gradient oracle: the three baselines and
/// MACL with every combination of its two switches.
pub fn oracle_specs(tau: f64) -> Result<Vec<LossSpec>> {
    let t = TemperatureConfig::new(tau, 0.5, 0.0)?;
    Ok(vec![
        LossSpec::infonce(tau)?,
        LossSpec::ntxent(tau)?,
        LossSpec::dcl(tau)?,
        LossSpec::macl(t, false, false),
        LossSpec::macl(t, true, false),
        LossSpec::macl(t, false, true),
        LossSpec::macl(t, true, true),
    ])
}

fn unit_vectors<R: Rng>(rng: &mut R, rows: usize, m: usize) -> Array2<f64> {
    let mut out = Array2::from_shape_simple_fn((rows, m), || rng.sample::<f64, _>(StandardNormal));
    for mut r in out.rows_mut() {
        let norm = r.dot(&r).sqrt();
        r /= norm;
    }
    out
}

/// Outcome of one oracle comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleCase {
    pub m: usize,
    pub k: usize,
    pub tau: f64,
    pub spec: LossSpec,
    pub agreement: GradientAgreement,
}

/// Compares analytic anchor, positive-key and negative-key gradients with
/// central differences of the single-anchor loss for one random draw. For
/// adaptive MACL the temperature comes from the anchor's own positive
/// similarity; temperature and reweighting factor are then held fixed.
pub fn oracle_case(m: usize, k: usize, spec: &LossSpec, fd: &FiniteDiffConfig, seed: u64, index: u64) -> Result<OracleCase> {
    let mut rng = rng::stream(seed, Purpose::Analysis, index);
    let v = unit_vectors(&mut rng, k + 2, m);
    let f = v.row(0);
    let g_pos = v.row(1);
    let g_negs = v.slice(ndarray::s![2.., ..]);
    let base = LogitsRow::unchecked(f.dot(&g_pos), g_negs.dot(&f).to_vec());
    let tau = if spec.is_adaptive() {
        adaptive_temperature(base.pos, &spec.temperature).tau
    } else {
        spec.temperature.tau0()
    };
    let weight = if spec.is_reweighted() { reweight_factor(&base, tau)? } else { 1.0 };
    let report = analytic_gradients(f, g_pos, g_negs, spec, tau)?;
    let variant = spec.variant;
    let numeric = finite_difference(
        |x| {
            let row = row_from_flat(x, m);
            match variant {
                LossVariant::Dcl => dcl_value(&row, tau),
                _ => infonce_value(&row, tau).map(|l| weight * l),
            }
            .unwrap_or(f64::NAN)
        },
        &flatten_inputs(f, g_pos, g_negs),
        fd,
    )?;
    Ok(OracleCase {
        m,
        k,
        tau: spec.temperature.tau0(),
        spec: *spec,
        agreement: compare_gradients(&flatten_report(&report), &numeric, fd),
    })
}

/// All oracle cases of the configured grid, in grid order.
pub fn oracle_cases(cfg: &VerifyConfig) -> Result<Vec<OracleCase>> {
    let fd = cfg.finite_diff();
    let mut cases = Vec::new();
    let mut index = 0u64;
    for &m in &cfg.dims {
        for &k in &cfg.ks {
            for &tau in &cfg.taus {
                for spec in oracle_specs(tau)? {
                    for _ in 0..cfg.draws_per_cell {
                        cases.push(oracle_case(m, k, &spec, &fd, cfg.seed, index)?);
                        index += 1;
                    }
                }
            }
        }
    }
    Ok(cases)
}

fn gradient_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let cases = oracle_cases(cfg)?;
    let total = cases
        .iter()
        .fold(GradientAgreement::default(), |acc, c| acc.merge(c.agreement));
    let failing = cases.iter().filter(|c| !c.agreement.passed()).count();
    Ok(SuiteReport {
        suite: "gradient_oracle".into(),
        cases: cases.len(),
        assertions: vec![
            AssertionOutcome::new("analytic_matches_finite_differences", failing == 0, total.max_rel_err),
            AssertionOutcome::new("failing_configurations", failing == 0, failing as f64),
        ],
    })
}

/// Tracks the worst gap of one identity.
struct Worst {
    name: &'static str,
    gap: f64,
}

impl Worst {
    fn new(name: &'static str) -> Self {
        Self { name, gap: 0.0 }
    }

    fn see(&mut self, gap: f64) {
        // NaN gaps must fail
        if !(gap <= self.gap) {
            self.gap = if gap.is_nan() { f64::INFINITY } else { gap };
        }
    }

    fn outcome(&self, tol: f64) -> AssertionOutcome {
        AssertionOutcome::new(self.name, self.gap <= tol, self.gap)
    }
}

/// Gap scaled to quantities of order one: `|a - b| / max(1, |a|, |b|)`.
fn scaled_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn identity_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let mut align = Worst::new("alignment_equals_one_minus_half_align_loss");
    let mut p_hat_sum = Worst::new("hardness_weights_sum_to_one");
    let mut p_hat_ratio = Worst::new("hardness_weight_is_p_over_w");
    let mut reweight = Worst::new("reweighted_anchor_gradient_is_infonce_over_w");
    let mut dcl = Worst::new("dcl_anchor_gradient_equals_reweighted_fixed_tau");
    let mut macl_off = Worst::new("macl_switches_off_equals_infonce");
    let mut alpha_zero = Worst::new("alpha_zero_keeps_tau0");

    let m = 8;
    for i in 0..cfg.identity_rows {
        let mut rng = rng::stream(cfg.seed, Purpose::Eval, i as u64);
        let k = cfg.ks[i % cfg.ks.len()];
        let tau = cfg.taus[i % cfg.taus.len()];

        let pairs = 4;
        let a_rows = UnitEmbeddingBatch::from_unit_rows(unit_vectors(&mut rng, pairs, m))?;
        let b_rows = UnitEmbeddingBatch::from_unit_rows(unit_vectors(&mut rng, pairs, m))?;
        let sims: Vec<f64> = (0..pairs).map(|p| a_rows.row(p).dot(&b_rows.row(p))).collect();
        let a = alignment_magnitude(&sims)?.a;
        align.see((a - (1.0 - alignment_loss(&a_rows, &b_rows)? / 2.0)).abs());

        let v = unit_vectors(&mut rng, k + 2, m);
        let (f, g_pos, g_negs) = (v.row(0), v.row(1), v.slice(ndarray::s![2.., ..]));
        let row = LogitsRow::unchecked(f.dot(&g_pos), g_negs.dot(&f).to_vec());
        let (_, p_neg) = softmax_probs(&row, tau)?;
        let w = scaling_factor(&row, tau)?;
        let p_hat = hardness_weights(&row, tau)?;
        p_hat_sum.see((p_hat.iter().sum::<f64>() - 1.0).abs());
        for (ph, p) in p_hat.iter().zip(&p_neg) {
            p_hat_ratio.see(scaled_gap(*ph, p / w));
        }

        let t = TemperatureConfig::fixed(tau)?;
        let info = analytic_gradients(f, g_pos, g_negs, &LossSpec::infonce(tau)?, tau)?;
        let rew = analytic_gradients(f, g_pos, g_negs, &LossSpec::macl(t, false, true), tau)?;
        let dcl_g = analytic_gradients(f, g_pos, g_negs, &LossSpec::dcl(tau)?, tau)?;
        for ((x_info, x_rew), x_dcl) in info.d_anchor.iter().zip(&rew.d_anchor).zip(&dcl_g.d_anchor) {
            reweight.see(scaled_gap(*x_rew, x_info / info.w));
            dcl.see(scaled_gap(*x_dcl, *x_rew));
        }

        let rows = [row.clone(), random_row(&mut rng, k)];
        let macl_value = batch_value(&rows, &LossSpec::macl(TemperatureConfig::new(tau, 0.7, 0.1)?, false, false))?;
        let info_value = batch_value(&rows, &LossSpec::infonce(tau)?)?;
        macl_off.see(scaled_gap(macl_value.mean_loss, info_value.mean_loss));

        let a_any: f64 = rng.random_range(-1.0..=1.0);
        let fixed = adaptive_temperature(a_any, &TemperatureConfig::new(tau, 0.0, rng.random_range(-1.0..=1.0))?);
        alpha_zero.see((fixed.tau - tau).abs());
    }
    let tol = cfg.identity_tol;
    Ok(SuiteReport {
        suite: "identities".into(),
        cases: cfg.identity_rows,
        assertions: [align, p_hat_sum, p_hat_ratio, reweight, dcl, macl_off, alpha_zero]
            .iter()
            .map(|w| w.outcome(tol))
            .collect(),
    })
}

fn monotonicity_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let a_grid: Vec<f64> = (0..=100).map(|i| -1.0 + i as f64 / 50.0).collect();
    let mut tau_a_ok = true;
    let mut tau_a_worst: f64 = 0.0;
    let mut ratio_ok = true;
    let mut ratio_limit = Worst::new("hardness_ratio_tends_to_one");
    let tau_grid = log_grid(0.01, 1e3, 41)?;
    for i in 0..cfg.monotonic_configs {
        let mut rng = rng::stream(cfg.seed, Purpose::Analysis, (1 << 40) + i as u64);
        let t = TemperatureConfig::new(
            rng.random_range(0.05..=1.0),
            rng.random_range(0.0..=2.0),
            rng.random_range(-1.0..=1.0),
        )?;
        let taus: Vec<f64> = a_grid.iter().map(|&a| adaptive_temperature(a, &t).tau).collect();
        for w in taus.windows(2) {
            tau_a_ok &= w[1] >= w[0];
            tau_a_worst = tau_a_worst.max(w[0] - w[1]);
        }

        let (s_a, s_b) = loop {
            let x: f64 = rng.random_range(-1.0..=1.0);
            let y: f64 = rng.random_range(-1.0..=1.0);
            if x != y {
                break (x.max(y), x.min(y));
            }
        };
        let ratios = tau_grid
            .iter()
            .map(|&tau| penalty_ratio(s_a, s_b, tau))
            .collect::<Result<Vec<_>>>()?;
        ratio_ok &= ratios.windows(2).all(|w| w[1] < w[0]);
        ratio_limit.see(ratios[ratios.len() - 1] - 1.0);
    }

    let entropy_grid = log_grid(0.01, 100.0, 41)?;
    let mut entropy_ok = true;
    let mut entropy_worst: f64 = 0.0;
    for i in 0..cfg.entropy_rows {
        let mut rng = rng::stream(cfg.seed, Purpose::Analysis, (2 << 40) + i as u64);
        let row = random_row(&mut rng, cfg.ks[i % cfg.ks.len()].max(2));
        let h = entropy_grid
            .iter()
            .map(|&tau| weight_entropy(&row, tau))
            .collect::<Result<Vec<_>>>()?;
        for w in h.windows(2) {
            // equal entropies may differ by rounding
            let drop = w[0] - w[1];
            entropy_worst = entropy_worst.max(drop);
            entropy_ok &= drop <= 1e-12;
        }
    }
    Ok(SuiteReport {
        suite: "monotonicity".into(),
        cases: cfg.monotonic_configs + cfg.entropy_rows,
        assertions: vec![
            AssertionOutcome::new("adaptive_tau_nondecreasing_in_alignment", tau_a_ok, tau_a_worst),
            AssertionOutcome::new("hardness_ratio_strictly_decreasing_in_tau", ratio_ok, 0.0),
            ratio_limit.outcome(1e-3),
            AssertionOutcome::new("hardness_entropy_nondecreasing_in_tau", entropy_ok, entropy_worst),
        ],
    })
}

fn proposition_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let report = proposition_report(&cfg.propositions)?;
    Ok(SuiteReport {
        suite: "propositions".into(),
        cases: cfg.propositions.random_rows,
        assertions: report.assertions,
    })
}

/// Symmetric scenario (positive 1, every negative -1): the swept `W`
/// against `K / (exp(2 / tau) + K)` plus two fixed spot values.
fn symmetric_suite(cfg: &VerifyConfig) -> Result<SuiteReport> {
    let grid = log_grid(cfg.propositions.tau_min, cfg.propositions.tau_max, cfg.propositions.tau_points)?;
    let mut closed = Worst::new("sweep_matches_closed_form");
    for &k in &cfg.ks {
        let sweep = sweep_tau(&LogitsRow::repeated(1.0, -1.0, k)?, &grid)?;
        for (&tau, w) in grid.iter().zip(&sweep.w) {
            closed.see((w - symmetric_closed_form(k, tau)).abs());
        }
    }
    let spot = |tau: f64| -> Result<f64> { scaling_factor(&LogitsRow::repeated(1.0, -1.0, 4)?, tau) };
    let w1 = spot(1.0)?;
    let w02 = spot(0.2)?;
    let gap1 = (w1 - 0.351215).abs();
    let gap02 = (w02 - 1.8157e-4).abs();
    Ok(SuiteReport {
        suite: "symmetric_closed_form".into(),
        cases: cfg.ks.len() * grid.len(),
        assertions: vec![
            closed.outcome(1e-12),
            AssertionOutcome::new("w_tau1_k4", gap1 <= 1e-5, gap1),
            AssertionOutcome::new("w_tau0.2_k4", gap02 <= 1e-7, gap02),
        ],
    })
}

/// Unit vector helper shared with tests and benches.
pub fn random_unit(seed: u64, index: u64, m: usize) -> Array1<f64> {
    let mut rng = rng::stream(seed, Purpose::Analysis, index);
    unit_vectors(&mut rng, 1, m).row(0).to_owned()
}
