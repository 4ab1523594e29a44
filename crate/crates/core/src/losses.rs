//! Forward values of the loss family.
//!
//! Every loss works on [`LogitsRow`]s so that in-batch (SimCLR style) and
//! queue (MoCo style) pipelines share one code path; they differ only in
//! where the negatives of each row come from.

use ndarray::Axis;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::stable::{check_tau, logsumexp};
use crate::temperature::adaptive_temperature;
use crate::types::{LogitsRow, LossSpec, LossVariant, UnitEmbeddingBatch};

/// Where the negatives of each anchor come from.
#[derive(Clone, Copy, Debug)]
pub enum NegativeSource<'a> {
    /// One batch of negatives per anchor.
    PerAnchor(&'a [UnitEmbeddingBatch]),
    /// Every anchor contrasts against the same pool, e.g. a key queue.
    Shared(&'a UnitEmbeddingBatch),
}

/// Similarity rows for each anchor against its positive key and negatives.
pub fn cosine_logits(
    anchors: &UnitEmbeddingBatch,
    pos_keys: &UnitEmbeddingBatch,
    negatives: NegativeSource<'_>,
) -> Result<Vec<LogitsRow>> {
    let m = anchors.dim();
    let same_dim = |b: &UnitEmbeddingBatch| {
        if b.dim() == m {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                expected: m,
                found: b.dim(),
            })
        }
    };
    same_dim(pos_keys)?;
    if pos_keys.len() != anchors.len() {
        return Err(Error::DimensionMismatch {
            expected: anchors.len(),
            found: pos_keys.len(),
        });
    }
    match negatives {
        NegativeSource::Shared(pool) => {
            same_dim(pool)?;
            let sims = anchors.view().dot(&pool.view().t());
            Ok(sims
                .axis_iter(Axis(0))
                .enumerate()
                .map(|(i, negs)| LogitsRow {
                    pos: anchors.row(i).dot(&pos_keys.row(i)),
                    negs: negs.to_vec(),
                })
                .collect())
        }
        NegativeSource::PerAnchor(batches) => {
            if batches.len() != anchors.len() {
                return Err(Error::DimensionMismatch {
                    expected: anchors.len(),
                    found: batches.len(),
                });
            }
            batches
                .iter()
                .enumerate()
                .map(|(i, negs)| {
                    same_dim(negs)?;
                    let f = anchors.row(i);
                    Ok(LogitsRow {
                        pos: f.dot(&pos_keys.row(i)),
                        negs: negs.view().dot(&f).to_vec(),
                    })
                })
                .collect()
        }
    }
}

/// `-log softmax(pos)` over `[pos, negs] / tau`, evaluated as
/// `softplus(lse(negs / tau) - pos / tau)` so that values near zero keep
/// their relative precision.
pub fn infonce_value(row: &LogitsRow, tau: f64) -> Result<f64> {
    Ok(softplus(dcl_value(row, tau)?))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-pos / tau + log sum_j exp(neg_j / tau)`. Can be negative.
pub fn dcl_value(row: &LogitsRow, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if row.negs.is_empty() {
        return Err(Error::EmptyNegatives);
    }
    Ok(logsumexp(row.negs.iter().copied(), tau) - row.pos / tau)
}

/// `1 / W = 1 + exp(pos/tau) / sum_j exp(neg_j/tau)`, evaluated without
/// forming `W` so that tiny scaling factors do not round to zero first.
pub fn reweight_factor(row: &LogitsRow, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(1.0 + (row.pos / tau - logsumexp(row.negs.iter().copied(), tau)).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BatchLossResult {
    pub mean_loss: f64,
    pub per_anchor_loss: Vec<f64>,
    pub tau_used: f64,
    /// Mean positive similarity of the batch (detached).
    pub a_batch: f64,
    /// Per-anchor reweighting factors (all 1 unless reweighting is on).
    pub v: Vec<f64>,
    pub clamped: bool,
}

/// Batch loss for any variant: resolves the temperature and reweighting
/// factors from the rows, then averages the per-anchor terms.
pub fn batch_value(rows: &[LogitsRow], spec: &LossSpec) -> Result<BatchLossResult> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let a_batch = mean_positive(rows);
    let (tau, clamped) = if spec.is_adaptive() {
        let t = adaptive_temperature(a_batch, &spec.temperature);
        (t.tau, t.clamped)
    } else {
        (spec.temperature.tau0(), false)
    };
    let v = if spec.is_reweighted() {
        rows.iter()
            .map(|r| reweight_factor(r, tau))
            .collect::<Result<Vec<_>>>()?
    } else {
        vec![1.0; rows.len()]
    };
    let mut out = batch_value_detached(rows, spec.variant, tau, &v)?;
    out.clamped = clamped;
    Ok(out)
}

/// MACL batch loss. Rejects other variants.
pub fn macl_batch_value(rows: &[LogitsRow], spec: &LossSpec) -> Result<BatchLossResult> {
    if spec.variant != LossVariant::Macl {
        return Err(Error::InvalidConfig(format!(
            "macl_batch_value called with variant {:?}",
            spec.variant
        )));
    }
    batch_value(rows, spec)
}

/// Batch loss with the temperature and reweighting factors supplied by the
/// caller and held fixed, as in a stop-gradient.
pub fn batch_value_detached(
    rows: &[LogitsRow],
    variant: LossVariant,
    tau: f64,
    v: &[f64],
) -> Result<BatchLossResult> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if v.len() != rows.len() {
        return Err(Error::DimensionMismatch {
            expected: rows.len(),
            found: v.len(),
        });
    }
    check_tau(tau)?;
    let per_anchor_loss = rows
        .iter()
        .zip(v)
        .map(|(row, &vi)| match variant {
            LossVariant::Dcl => dcl_value(row, tau),
            _ => Ok(vi * infonce_value(row, tau)?),
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = per_anchor_loss.iter().sum::<f64>() / rows.len() as f64;
    Ok(BatchLossResult {
        mean_loss,
        per_anchor_loss,
        tau_used: tau,
        a_batch: mean_positive(rows),
        v: v.to_vec(),
        clamped: false,
    })
}

fn mean_positive(rows: &[LogitsRow]) -> f64 {
    rows.iter().map(|r| r.pos).sum::<f64>() / rows.len() as f64
}

/// Index of the other view of the same instance among `2n` stacked rows.
pub fn inbatch_partner(k: usize, n: usize) -> usize {
    if k < n {
        k + n
    } else {
        k - n
    }
}

/// Indices of the `2n - 2` in-batch negatives of anchor `k`, ascending.
pub fn inbatch_negatives(k: usize, n: usize) -> impl Iterator<Item = usize> {
    let partner = inbatch_partner(k, n);
    (0..2 * n).filter(move |&l| l != k && l != partner)
}

/// Rows of the symmetric in-batch construction over `2N` anchors: view 1
/// rows first, then view 2 rows.
pub fn inbatch_logits(
    view1: &UnitEmbeddingBatch,
    view2: &UnitEmbeddingBatch,
) -> Result<Vec<LogitsRow>> {
    if view1.dim() != view2.dim() {
        return Err(Error::DimensionMismatch {
            expected: view1.dim(),
            found: view2.dim(),
        });
    }
    if view1.len() != view2.len() {
        return Err(Error::DimensionMismatch {
            expected: view1.len(),
            found: view2.len(),
        });
    }
    let n = view1.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let z = view1.concat(view2)?;
    let gram = z.view().dot(&z.view().t());
    Ok((0..2 * n)
        .map(|k| LogitsRow {
            pos: gram[[k, inbatch_partner(k, n)]],
            negs: inbatch_negatives(k, n).map(|l| gram[[k, l]]).collect(),
        })
        .collect())
}

/// Symmetric in-batch contrast: each of the `2N` embeddings is an anchor
/// whose positive is its counterpart in the other view and whose negatives
/// are the remaining `2N - 2` embeddings. For MACL the temperature comes
/// from all `2N` positive similarities.
pub fn inbatch_contrast(
    view1: &UnitEmbeddingBatch,
    view2: &UnitEmbeddingBatch,
    spec: &LossSpec,
) -> Result<BatchLossResult> {
    batch_value(&inbatch_logits(view1, view2)?, spec)
}
