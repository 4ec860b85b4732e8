//! Property tests for metric invariances, loss shape, logit adjustment and
//! the feature-file round trip.

use grod::dataset::FeatureBatch;
use grod::harness::io::{format_feature_file, parse_feature_file, LabelRange};
use grod::loss::{loss_grad_logits, loss_total};
use grod::metrics::{aupr_in, aupr_out, auroc, fpr_at_tpr};
use grod::postprocess::adjust_logits;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..40)
}

/// Coarse grid so ties are common.
fn tied_scores() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((-5i32..5).prop_map(f64::from), 1..30)
}

proptest! {
    #[test]
    fn auroc_is_bounded_and_antisymmetric(id in tied_scores(), ood in tied_scores()) {
        let a = auroc(&id, &ood).unwrap();
        let b = auroc(&ood, &id).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(id in scores(), ood in scores(), scale in 0.01f64..100.0, shift in -10.0f64..10.0) {
        let f = |v: &[f64]| v.iter().map(|x| scale * x + shift).collect::<Vec<_>>();
        let (id2, ood2) = (f(&id), f(&ood));
        prop_assert!((auroc(&id, &ood).unwrap() - auroc(&id2, &ood2).unwrap()).abs() < 1e-12);
        prop_assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), fpr_at_tpr(&id2, &ood2, 0.95).unwrap());
        prop_assert!((aupr_in(&id, &ood).unwrap() - aupr_in(&id2, &ood2).unwrap()).abs() < 1e-12);
        prop_assert!((aupr_out(&id, &ood).unwrap() - aupr_out(&id2, &ood2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn metrics_ignore_row_order(id in scores(), ood in scores()) {
        let (mut id2, mut ood2) = (id.clone(), ood.clone());
        id2.reverse();
        let half = ood2.len() / 2;
        ood2.rotate_left(half);
        prop_assert_eq!(auroc(&id, &ood).unwrap(), auroc(&id2, &ood2).unwrap());
        prop_assert_eq!(aupr_in(&id, &ood).unwrap(), aupr_in(&id2, &ood2).unwrap());
        prop_assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), fpr_at_tpr(&id2, &ood2, 0.95).unwrap());
    }

    #[test]
    fn separated_scores_are_perfect(id in scores(), ood in scores()) {
        let ood: Vec<f64> = ood.iter().map(|x| x - 200.0).collect();
        prop_assert_eq!(auroc(&id, &ood).unwrap(), 1.0);
        prop_assert_eq!(fpr_at_tpr(&id, &ood, 0.95).unwrap(), 0.0);
        prop_assert_eq!(aupr_in(&id, &ood).unwrap(), 1.0);
        prop_assert_eq!(aupr_out(&id, &ood).unwrap(), 1.0);
    }

    #[test]
    fn adjusted_rows_are_distributions(raw in prop::collection::vec(-20.0f64..20.0, 4 * 5)) {
        let raw = Array2::from_shape_vec((5, 4), raw).unwrap();
        let adj = adjust_logits(raw.view());
        prop_assert_eq!(adj.ncols(), 3);
        for row in adj.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn loss_is_nonnegative_and_gradient_sums_to_zero(
        logits in prop::collection::vec(-15.0f64..15.0, 4),
        weights in prop::collection::vec(0.0f64..1.0, 4),
        gamma in 0.0f64..=1.0,
    ) {
        let total: f64 = weights.iter().sum::<f64>() + 1e-3;
        let y = Array1::from_iter(weights.iter().map(|w| (w + 1e-3 / 4.0) / total));
        let z = Array1::from(logits);
        prop_assert!(loss_total(y.view(), z.view(), gamma) >= -1e-12);
        // softmax gradients are orthogonal to the all-ones direction
        prop_assert!(loss_grad_logits(y.view(), z.view(), gamma).sum().abs() < 1e-9);
    }

    #[test]
    fn feature_files_round_trip(
        rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 3), 0usize..4), 1..20)
    ) {
        let flat: Vec<f64> = rows.iter().flat_map(|(x, _)| x.iter().copied()).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let batch = FeatureBatch::new(Array2::from_shape_vec((rows.len(), 3), flat).unwrap(), labels).unwrap();
        let text = format_feature_file(&batch, 3);
        let back = parse_feature_file::<f64>(&text, LabelRange::WithOod).unwrap();
        prop_assert_eq!((back.dim, back.classes), (3, 3));
        prop_assert_eq!(back.batch, batch);
    }
}
