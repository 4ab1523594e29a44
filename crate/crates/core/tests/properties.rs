use contrast_lab::gradients::{hardness_weights, scaling_factor, similarity_gradients};
use contrast_lab::losses::{dcl_value, infonce_value, inbatch_contrast, reweight_factor};
use contrast_lab::temperature::adaptive_temperature;
use contrast_lab::types::{make_unit_batch, LogitsRow, LossSpec, TemperatureConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn any_row() -> impl Strategy<Value = LogitsRow> {
    (-1.0f64..=1.0, prop::collection::vec(-1.0f64..=1.0, 1..40)).prop_map(|(pos, negs)| LogitsRow::new(pos, negs).unwrap())
}

fn two_views() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (2usize..6, 2usize..5).prop_flat_map(|(n, m)| {
        let view = prop::collection::vec(0.1f64..1.0, n * m)
            .prop_map(move |v| Array2::from_shape_vec((n, m), v).unwrap());
        (view.clone(), view)
    })
}

proptest! {
    #[test]
    fn infonce_is_dcl_plus_softplus_gap(r in any_row(), tau in 0.05f64..2.0) {
        let info = infonce_value(&r, tau).unwrap();
        let dcl = dcl_value(&r, tau).unwrap();
        // InfoNCE = log(1 + e^{DCL}) >= max(0, DCL)
        prop_assert!(info >= dcl.max(0.0) - 1e-12);
        prop_assert!((info - dcl.exp().ln_1p()).abs() <= 1e-9 * info.max(1.0));
    }

    #[test]
    fn scaling_factor_is_reciprocal_of_reweight(r in any_row(), tau in 0.05f64..2.0) {
        let w = scaling_factor(&r, tau).unwrap();
        prop_assert!(w > 0.0 && w < 1.0);
        prop_assert!((reweight_factor(&r, tau).unwrap() * w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hardness_weights_order_follows_similarity(r in any_row(), tau in 0.05f64..2.0) {
        let p = hardness_weights(&r, tau).unwrap();
        for i in 0..r.k() {
            for j in 0..r.k() {
                if r.negs[i] > r.negs[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn positive_gradient_pulls_and_negatives_push(r in any_row(), tau in 0.05f64..2.0) {
        for spec in [LossSpec::infonce(tau).unwrap(), LossSpec::dcl(tau).unwrap()] {
            let g = similarity_gradients(&r, &spec, tau).unwrap();
            prop_assert!(g.d_pos < 0.0);
            prop_assert!(g.d_negs.iter().all(|&d| d > 0.0));
        }
    }

    #[test]
    fn adaptive_tau_stays_above_floor(a in -1.0f64..=1.0, alpha in 0.0f64..50.0, a0 in -1.0f64..=1.0) {
        let cfg = TemperatureConfig::new(0.1, alpha, a0).unwrap();
        let t = adaptive_temperature(a, &cfg);
        prop_assert!(t.tau >= 0.05 * 0.1 - 1e-18);
        prop_assert_eq!(t.clamped, (1.0 + alpha * (a - a0)) * 0.1 < 0.005);
    }

    #[test]
    fn inbatch_loss_is_symmetric_in_views((x1, x2) in two_views(), tau in 0.05f64..2.0) {
        let v1 = make_unit_batch(x1).unwrap();
        let v2 = make_unit_batch(x2).unwrap();
        let spec = LossSpec::infonce(tau).unwrap();
        let ab = inbatch_contrast(&v1, &v2, &spec).unwrap().mean_loss;
        let ba = inbatch_contrast(&v2, &v1, &spec).unwrap().mean_loss;
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.abs().max(1.0));
    }
}
