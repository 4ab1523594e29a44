//! Closed-form gradients of the loss family and a central-difference oracle.
//!
//! For one anchor `f` with positive key `g+` and negatives `g_j`, InfoNCE
//! has
//!
//! ```text
//! dL/df    = -(W / tau) (g+ - sum_j P^_j g_j)
//! dL/dg+   = -(W / tau) f
//! dL/dg_j  =  (W / tau) P^_j f
//! ```
//!
//! where `W = sum_j P_j = 1 - P+` is the gradient scaling factor and
//! `P^_j = P_j / W` are the hardness weights. DCL and reweighted MACL have
//! the same expressions with `W` replaced by 1. All vectors are treated as
//! free variables of the dot-product loss.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stable::{check_tau, softmax, softmax_split};
use crate::types::{GradientReport, LogitsRow, LossSpec, UNIT_NORM_TOL};

/// Softmax probabilities of the positive and each negative.
pub fn softmax_probs(row: &LogitsRow, tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    Ok(softmax_split(row.pos, &row.negs, tau))
}

/// `W = sum_j P_j`, summed over the negatives rather than formed as
/// `1 - P+` so small values keep their relative precision.
pub fn scaling_factor(row: &LogitsRow, tau: f64) -> Result<f64> {
    let (_, p_neg) = softmax_probs(row, tau)?;
    Ok(p_neg.iter().sum())
}

/// Softmax over the negatives alone.
pub fn hardness_weights(row: &LogitsRow, tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    if row.negs.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    Ok(softmax(&row.negs, tau))
}

/// Derivative of `W` with respect to `tau`:
/// `(1/tau^2) P+ sum_j (s+ - s_j) P_j`, which equals the unshifted form
/// `(1/tau^2) E+ / (E+ + sum E)^2 sum_j (s+ - s_j) E_j`.
pub fn dw_dtau(row: &LogitsRow, tau: f64) -> Result<f64> {
    let (p_pos, p_neg) = softmax_probs(row, tau)?;
    let spread: f64 = row
        .negs
        .iter()
        .zip(&p_neg)
        .map(|(s, p)| (row.pos - s) * p)
        .sum();
    Ok(p_pos * spread / (tau * tau))
}

/// Derivatives of one anchor's loss term with respect to its similarities,
/// with the temperature and any reweighting factor detached.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGradient {
    pub d_pos: f64,
    pub d_negs: Vec<f64>,
}

pub fn similarity_gradients(row: &LogitsRow, spec: &LossSpec, tau: f64) -> Result<SimilarityGradient> {
    let w = scaling_factor(row, tau)?;
    let p_hat = hardness_weights(row, tau)?;
    let scale = if spec.keeps_scaling_factor() { w } else { 1.0 } / tau;
    Ok(SimilarityGradient {
        d_pos: -scale,
        d_negs: p_hat.into_iter().map(|p| scale * p).collect(),
    })
}

fn check_unit(v: ArrayView1<'_, f64>, row: usize) -> Result<()> {
    let norm = v.dot(&v).sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::NotUnitNorm { row, norm });
    }
    Ok(())
}

/// Gradients of one anchor's loss term with respect to the anchor, its
/// positive key and each negative key. `tau_used` is the temperature the
/// forward pass used (the adaptive one for MACL), held constant.
pub fn analytic_gradients(
    f: ArrayView1<'_, f64>,
    g_pos: ArrayView1<'_, f64>,
    g_negs: ArrayView2<'_, f64>,
    spec: &LossSpec,
    tau_used: f64,
) -> Result<GradientReport> {
    check_tau(tau_used)?;
    let m = f.len();
    for found in [g_pos.len(), g_negs.ncols()] {
        if found != m {
            return Err(Error::DimensionMismatch { expected: m, found });
        }
    }
    if g_negs.nrows() == 0 {
        return Err(Error::EmptyNegatives);
    }
    check_unit(f, 0)?;
    check_unit(g_pos, 1)?;
    for (j, g) in g_negs.axis_iter(Axis(0)).enumerate() {
        check_unit(g, j + 2)?;
    }

    let row = LogitsRow::unchecked(f.dot(&g_pos), g_negs.dot(&f).to_vec());
    let (p_pos, p_neg) = softmax_probs(&row, tau_used)?;
    let w: f64 = p_neg.iter().sum();
    let p_hat = hardness_weights(&row, tau_used)?;
    let scale = if spec.keeps_scaling_factor() { w } else { 1.0 } / tau_used;

    let p_hat_view = ArrayView1::from(p_hat.as_slice());
    let weighted_negs = g_negs.t().dot(&p_hat_view);
    let d_anchor = (&g_pos - &weighted_negs) * (-scale);
    let d_pos_key = f.to_owned() * (-scale);
    let mut d_neg_keys = Array2::zeros((g_negs.nrows(), m));
    for (mut out, &ph) in d_neg_keys.axis_iter_mut(Axis(0)).zip(&p_hat) {
        out.assign(&(&f * (scale * ph)));
    }
    Ok(GradientReport {
        d_anchor,
        d_pos_key,
        d_neg_keys,
        w,
        p_pos,
        p_neg,
        p_hat,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiniteDiffConfig {
    /// Central-difference half step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-5,
            abs_tol: 1e-8,
        }
    }
}

impl FiniteDiffConfig {
    pub fn validate(&self) -> Result<()> {
        if self.step > 0.0 && self.rel_tol > 0.0 && self.abs_tol > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(
                "finite-difference step and tolerances must be positive".into(),
            ))
        }
    }

    /// `|a - b| <= abs_tol + rel_tol * max(|a|, |b|)`.
    pub fn close(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.abs_tol + self.rel_tol * analytic.abs().max(numeric.abs())
    }
}

/// Central differences `(L(x + h e_k) - L(x - h e_k)) / 2h` per coordinate.
pub fn finite_difference<F>(loss_fn: F, point: &[f64], cfg: &FiniteDiffConfig) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    cfg.validate()?;
    let h = cfg.step;
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for k in 0..point.len() {
        x[k] = point[k] + h;
        let up = loss_fn(&x);
        x[k] = point[k] - h;
        let down = loss_fn(&x);
        x[k] = point[k];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteProbe(k));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst disagreement between two gradient vectors under `cfg`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradientAgreement {
    pub max_abs_err: f64,
    /// Largest `|a - n| / max(|a|, |n|)` among failing or nonzero entries.
    pub max_rel_err: f64,
    pub failures: usize,
}

impl GradientAgreement {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            failures: self.failures + other.failures,
        }
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], cfg: &FiniteDiffConfig) -> GradientAgreement {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    analytic
        .iter()
        .zip(numeric)
        .fold(GradientAgreement::default(), |acc, (&a, &n)| {
            let abs = (a - n).abs();
            let scale = a.abs().max(n.abs());
            let rel = if scale > 0.0 { abs / scale } else { 0.0 };
            GradientAgreement {
                max_abs_err: acc.max_abs_err.max(abs),
                max_rel_err: acc.max_rel_err.max(rel),
                failures: acc.failures + usize::from(!cfg.close(a, n)),
            }
        })
}

/// Flattens a gradient report as `[d_anchor, d_pos_key, d_neg_keys...]`,
/// the same order as the probe vector used by the oracle.
pub fn flatten_report(report: &GradientReport) -> Vec<f64> {
    report
        .d_anchor
        .iter()
        .chain(report.d_pos_key.iter())
        .chain(report.d_neg_keys.iter())
        .copied()
        .collect()
}

/// Packs `f`, `g+` and the negatives into one probe vector.
pub fn flatten_inputs(
    f: ArrayView1<'_, f64>,
    g_pos: ArrayView1<'_, f64>,
    g_negs: ArrayView2<'_, f64>,
) -> Vec<f64> {
    f.iter()
        .chain(g_pos.iter())
        .chain(g_negs.iter())
        .copied()
        .collect()
}

/// Similarity row of a flattened `[f, g+, g_1..g_K]` probe vector.
pub fn row_from_flat(x: &[f64], m: usize) -> LogitsRow {
    let f = ArrayView1::from(&x[..m]);
    let g_pos = ArrayView1::from(&x[m..2 * m]);
    let negs = x[2 * m..]
        .chunks(m)
        .map(|g| f.dot(&ArrayView1::from(g)))
        .collect();
    LogitsRow::unchecked(f.dot(&g_pos), negs)
}
