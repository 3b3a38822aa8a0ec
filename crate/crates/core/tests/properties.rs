use cyclegan_ad::calibrate::{acc_threshold, auc_roc, evaluate_scores, zfn_threshold, Confusion};
use cyclegan_ad::dataset::{Image, Label};
use cyclegan_ad::losses::{adversarial_loss, cycle_loss, identity_loss, AdvMode, Side};
use cyclegan_ad::scoring::{difference_map, frechet_distance, sse_score, FeatureStats, Reconstruction};
use cyclegan_ad::tensor::{Shape, Tensor};
use proptest::prelude::*;

fn image_pair() -> impl Strategy<Value = (Image, Image)> {
    (1usize..=3, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
        let c = if c == 2 { 3 } else { c };
        let n = c * h * w;
        (prop::collection::vec(0.0f32..=1.0, n), prop::collection::vec(0.0f32..=1.0, n))
            .prop_map(move |(a, b)| (Image::new(c, h, w, a).unwrap(), Image::new(c, h, w, b).unwrap()))
    })
}

fn labeled_scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
    (1usize..20, 1usize..20).prop_flat_map(|(n, a)| {
        (prop::collection::vec(-5.0f64..5.0, n), prop::collection::vec(-5.0f64..5.0, a)).prop_map(|(ns, ab)| {
            ns.into_iter().map(|s| (s, false)).chain(ab.into_iter().map(|s| (s, true))).collect()
        })
    })
}

/// Scores drawn from a small grid so ties are common.
fn tied_scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec((0u8..5, any::<bool>()), 2..30).prop_map(|v| v.into_iter().map(|(s, l)| (s as f64, l)).collect())
}

fn has_both(s: &[(f64, bool)]) -> bool {
    s.iter().any(|p| p.1) && s.iter().any(|p| !p.1)
}

/// At least `channels + 3` positions, so covariances are full rank and the
/// square root is well conditioned.
fn grid_stats(channels: usize) -> impl Strategy<Value = FeatureStats> {
    (channels + 3..channels + 12).prop_flat_map(move |n| {
        prop::collection::vec(-2.0f64..2.0, channels * n).prop_map(move |g| FeatureStats::from_grid(&g, channels).unwrap())
    })
}

fn tensor(v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v).unwrap()
}

proptest! {
    #[test]
    fn sse_is_a_symmetric_nonnegative_discrepancy((a, b) in image_pair()) {
        let ab = sse_score(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, sse_score(&b, &a).unwrap());
        prop_assert_eq!(sse_score(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(ab == 0.0, a == b);
    }

    #[test]
    fn difference_map_sums_to_sse((a, b) in image_pair()) {
        let rec = Reconstruction { original: a.clone(), generated: b.clone(), source_id: "p".into(), label: Label::Normal };
        let map = difference_map(&rec).unwrap();
        prop_assert_eq!(map.raw.len(), a.height() * a.width());
        prop_assert_eq!(map.sum(), sse_score(&a, &b).unwrap());
        prop_assert!(map.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(a in grid_stats(3), b in grid_stats(3)) {
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab.abs()), "{} vs {}", ab, ba);
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn zfn_threshold_catches_every_abnormal(s in labeled_scores()) {
        let tau = zfn_threshold(&s).unwrap();
        let c = Confusion::at(&s, tau);
        prop_assert_eq!(c.fn_, 0);
        prop_assert_eq!(c.recall(), 1.0);
    }

    #[test]
    fn unconstrained_accuracy_dominates(s in labeled_scores()) {
        let m = evaluate_scores(&s).unwrap();
        prop_assert!(m.max_acc >= m.zfn_acc);
        prop_assert_eq!(Confusion::at(&s, m.acc_threshold).accuracy(), m.max_acc);
        // τ = −∞ (flag everything) is always a candidate.
        let n_abn = s.iter().filter(|p| p.1).count() as f64;
        prop_assert!(m.max_acc >= n_abn / s.len() as f64);
    }

    #[test]
    fn balanced_sets_reach_at_least_half(n in 1usize..15, raw in prop::collection::vec(-3.0f64..3.0, 30)) {
        let s: Vec<(f64, bool)> = (0..2 * n).map(|i| (raw[i], i >= n)).collect();
        prop_assert!(acc_threshold(&s).unwrap().1 >= 0.5);
    }

    #[test]
    fn metrics_ignore_monotone_rescaling(s in tied_scores()) {
        prop_assume!(has_both(&s));
        let warped: Vec<(f64, bool)> = s.iter().map(|&(v, l)| ((0.7 * v).exp() * 3.0 - 1.0, l)).collect();
        let (m, w) = (evaluate_scores(&s).unwrap(), evaluate_scores(&warped).unwrap());
        prop_assert_eq!(m.auc, w.auc);
        prop_assert_eq!(m.zfn_acc, w.zfn_acc);
        prop_assert_eq!(m.max_acc, w.max_acc);
    }

    #[test]
    fn auc_flips_with_the_labels(s in tied_scores()) {
        prop_assume!(has_both(&s));
        let auc = auc_roc(&s).unwrap();
        let flipped: Vec<(f64, bool)> = s.iter().map(|&(v, l)| (v, !l)).collect();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!((auc + auc_roc(&flipped).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cycle_and_identity_losses_are_symmetric_l1(
        v in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20)
    ) {
        let col = |k: usize| tensor(v.iter().map(|t| [t.0, t.1, t.2, t.3][k]).collect());
        let (x, xr, y, yr) = (col(0), col(1), col(2), col(3));
        let c = cycle_loss(&x, &xr, &y, &yr).unwrap();
        prop_assert!(c >= 0.0);
        prop_assert!((c - cycle_loss(&y, &yr, &x, &xr).unwrap()).abs() < 1e-12);
        prop_assert!((c - cycle_loss(&xr, &x, &yr, &y).unwrap()).abs() < 1e-12);
        prop_assert_eq!(identity_loss(&x, &x, &y, &y).unwrap(), 0.0);
        let expect = v.iter().map(|t| (t.0 - t.1).abs()).sum::<f64>() / v.len() as f64
            + v.iter().map(|t| (t.2 - t.3).abs()).sum::<f64>() / v.len() as f64;
        prop_assert!((c - expect).abs() < 1e-12);
    }

    #[test]
    fn least_squares_losses_are_nonnegative(
        r in prop::collection::vec(-3.0f64..3.0, 1..16), shift in -3.0f64..3.0
    ) {
        let real = tensor(r.clone());
        let fake = tensor(r.iter().map(|v| v + shift).collect());
        for side in [Side::Generator, Side::Discriminator] {
            prop_assert!(adversarial_loss(&real, &fake, AdvMode::LeastSquares, side).unwrap() >= 0.0);
        }
    }

    #[test]
    fn log_losses_stay_finite_on_closed_unit_interval(
        r in prop::collection::vec(prop_oneof![Just(0.0f64), Just(1.0f64), 0.0f64..=1.0], 1..16),
        f in prop::collection::vec(prop_oneof![Just(0.0f64), Just(1.0f64), 0.0f64..=1.0], 16)
    ) {
        let real = tensor(r.clone());
        let fake = tensor(f[..r.len()].to_vec());
        for side in [Side::Generator, Side::Discriminator] {
            prop_assert!(adversarial_loss(&real, &fake, AdvMode::Log, side).unwrap().is_finite());
        }
    }
}
