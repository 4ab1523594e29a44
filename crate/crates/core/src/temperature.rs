//! Alignment estimation and the alignment-adaptive temperature.
//!
//! The alignment magnitude `A` is the mean positive-pair similarity. On the
//! unit sphere `||f - g||^2 = 2 - 2 f.g`, so `A = 1 - L_align / 2` exactly.
//! The adaptive temperature grows linearly with `A`:
//!
//! ```text
//! tau_a = [1 + alpha (A - A0)] tau0
//! ```
//!
//! clamped from below at `tau_floor_ratio * tau0` so that large `alpha`
//! with poor alignment cannot produce a non-positive temperature.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{TemperatureConfig, UnitEmbeddingBatch, SIMILARITY_TOL};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlignmentEstimate {
    /// Mean positive similarity.
    pub a: f64,
    /// Mean squared distance of positive pairs, `2 - 2A`.
    pub align_loss: f64,
    pub n_pairs: usize,
}

/// Mean of `||f_i - g_i||^2` over the batch.
pub fn alignment_loss(anchors: &UnitEmbeddingBatch, pos_keys: &UnitEmbeddingBatch) -> Result<f64> {
    if anchors.len() != pos_keys.len() {
        return Err(Error::DimensionMismatch {
            expected: anchors.len(),
            found: pos_keys.len(),
        });
    }
    if anchors.dim() != pos_keys.dim() {
        return Err(Error::DimensionMismatch {
            expected: anchors.dim(),
            found: pos_keys.dim(),
        });
    }
    let total: f64 = (0..anchors.len())
        .map(|i| {
            let diff = &anchors.row(i) - &pos_keys.row(i);
            diff.dot(&diff)
        })
        .sum();
    Ok(total / anchors.len() as f64)
}

pub fn alignment_magnitude(pos_sims: &[f64]) -> Result<AlignmentEstimate> {
    if pos_sims.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(&bad) = pos_sims
        .iter()
        .find(|s| !(s.abs() <= 1.0 + SIMILARITY_TOL))
    {
        return Err(Error::SimilarityOutOfRange(bad));
    }
    let a = pos_sims.iter().sum::<f64>() / pos_sims.len() as f64;
    Ok(AlignmentEstimate {
        a,
        align_loss: 2.0 - 2.0 * a,
        n_pairs: pos_sims.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdaptiveTau {
    pub tau: f64,
    /// The raw value fell below the floor and was raised to it.
    pub clamped: bool,
}

pub fn adaptive_temperature(a: f64, cfg: &TemperatureConfig) -> AdaptiveTau {
    let raw = (1.0 + cfg.alpha() * (a - cfg.a0())) * cfg.tau0();
    let floor = cfg.tau_floor_ratio() * cfg.tau0();
    if raw < floor {
        AdaptiveTau {
            tau: floor,
            clamped: true,
        }
    } else {
        AdaptiveTau {
            tau: raw,
            clamped: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn batch(rows: &[Vec<f64>]) -> UnitEmbeddingBatch {
        UnitEmbeddingBatch::from_rows(rows).unwrap()
    }

    #[test]
    fn alignment_loss_extremes() {
        let f = batch(&[vec![0.3, 0.4, 0.5], vec![1.0, 0.0, 0.0]]);
        assert_eq!(alignment_loss(&f, &f).unwrap(), 0.0);
        let neg = batch(&[vec![-0.3, -0.4, -0.5], vec![-1.0, 0.0, 0.0]]);
        assert!((alignment_loss(&f, &neg).unwrap() - 4.0).abs() < 1e-12);
        let a = batch(&[vec![1.0, 0.0]]);
        let b = batch(&[vec![0.0, 1.0]]);
        assert!((alignment_loss(&a, &b).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_loss_shape_errors() {
        let a = batch(&[vec![1.0, 0.0]]);
        let b = batch(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(alignment_loss(&a, &b).is_err());
        let c = batch(&[vec![1.0, 0.0, 0.0]]);
        assert!(alignment_loss(&a, &c).is_err());
    }

    #[test]
    fn magnitude_examples() {
        let est = alignment_magnitude(&[0.9, 0.8, 1.0]).unwrap();
        assert!((est.a - 0.9).abs() < 1e-12);
        assert!((est.align_loss - 0.2).abs() < 1e-12);
        assert_eq!(est.n_pairs, 3);
        let perfect = alignment_magnitude(&[1.0; 4]).unwrap();
        assert_eq!((perfect.a, perfect.align_loss), (1.0, 0.0));
        assert!(matches!(alignment_magnitude(&[]), Err(Error::EmptyInput)));
        assert!(matches!(
            alignment_magnitude(&[0.5, 1.2]),
            Err(Error::SimilarityOutOfRange(_))
        ));
    }

    #[test]
    fn adaptive_examples() {
        let cfg = TemperatureConfig::new(0.1, 0.5, 0.0).unwrap();
        let t = adaptive_temperature(0.9, &cfg);
        assert!((t.tau - 0.145).abs() < 1e-12 && !t.clamped);

        let fixed = TemperatureConfig::new(0.3, 0.0, 0.4).unwrap();
        for a in [-1.0, -0.2, 0.0, 0.7, 1.0] {
            assert_eq!(adaptive_temperature(a, &fixed).tau, 0.3);
        }

        let sent = TemperatureConfig::new(0.05, 2.0, 0.8).unwrap();
        assert_eq!(adaptive_temperature(0.8, &sent).tau, 0.05);
    }

    #[test]
    fn clamp_engages_for_large_alpha() {
        let cfg = TemperatureConfig::new(0.05, 2.0, 0.8).unwrap();
        let t = adaptive_temperature(-1.0, &cfg);
        assert!(t.clamped);
        assert!((t.tau - 0.05 * 0.05).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn monotone_in_alignment(
            tau0 in 0.01f64..2.0,
            alpha in 0.0f64..3.0,
            a0 in -1.0f64..1.0,
            a in -1.0f64..1.0,
            da in 0.0f64..1.0,
        ) {
            let cfg = TemperatureConfig::new(tau0, alpha, a0).unwrap();
            let lo = adaptive_temperature(a, &cfg);
            let hi = adaptive_temperature((a + da).min(1.0), &cfg);
            prop_assert!(hi.tau >= lo.tau);
            prop_assert!(lo.tau > 0.0);
        }

        #[test]
        fn range_for_unit_alpha(tau0 in 0.01f64..2.0, alpha in 0.0f64..=1.0, a in -1.0f64..=1.0) {
            let cfg = TemperatureConfig::new(tau0, alpha, 0.0).unwrap();
            let ratio = adaptive_temperature(a, &cfg).tau / tau0;
            prop_assert!(ratio >= (1.0 - alpha).max(cfg.tau_floor_ratio()) - 1e-12);
            prop_assert!(ratio <= 1.0 + alpha + 1e-12);
        }

        #[test]
        fn magnitude_matches_alignment_loss(
            raw in proptest::collection::vec(-1.0f64..1.0, 2 * 3 * 5),
        ) {
            let rows: Vec<Vec<f64>> = raw.chunks(3).map(|c| {
                let mut v = c.to_vec();
                v[0] += 2.0;
                v
            }).collect();
            let f = batch(&rows[..5]);
            let g = batch(&rows[5..]);
            let sims: Vec<f64> = (0..5).map(|i| f.row(i).dot(&g.row(i))).collect();
            let est = alignment_magnitude(&sims).unwrap();
            let l = alignment_loss(&f, &g).unwrap();
            prop_assert!((est.a - (1.0 - l / 2.0)).abs() <= 1e-12);
        }
    }
}
