//! Max-shifted exponentials shared by the loss and gradient code.

use crate::error::{Error, Result};

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTau(tau))
    }
}

/// `log sum_k exp(x_k / tau)`.
pub(crate) fn logsumexp(xs: impl Iterator<Item = f64> + Clone, tau: f64) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = xs.map(|x| ((x - max) / tau).exp()).sum();
    max / tau + sum.ln()
}

/// Softmax of `[pos, negs...] / tau`, returned as `(p_pos, p_neg)`.
pub(crate) fn softmax_split(pos: f64, negs: &[f64], tau: f64) -> (f64, Vec<f64>) {
    let max = negs.iter().copied().fold(pos, f64::max);
    let e_pos = ((pos - max) / tau).exp();
    let e_neg: Vec<f64> = negs.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let total = e_pos + e_neg.iter().sum::<f64>();
    (e_pos / total, e_neg.into_iter().map(|e| e / total).collect())
}

/// Softmax over the negatives alone.
pub(crate) fn softmax(xs: &[f64], tau: f64) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|&s| ((s - max) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}
