use esdmr::metrics::{
    auc, basic_metrics, confusion, e_measure_binary, e_phi_max, evaluate_image, mae, s_alpha, weighted_fscore, Weighting,
};
use esdmr::Tensor;
use proptest::prelude::*;

const SIDE: usize = 8;

fn map(values: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![1, 1, SIDE, SIDE], values.to_vec()).unwrap()
}

fn bools(t: &Tensor<f64>) -> Vec<bool> {
    t.data().iter().map(|&v| v == 1.0).collect()
}

/// Reference with both classes present.
fn two_class() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop::bool::ANY, SIDE * SIDE)
        .prop_filter("both classes", |v| v.iter().any(|&b| b) && v.iter().any(|&b| !b))
        .prop_map(|v| v.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect())
}

/// Probabilities on the 1/255 grid, restricted to the lower quarter so that a
/// strictly increasing map can spread them without leaving the grid.
fn grid_probs() -> impl Strategy<Value = Vec<u32>> {
    prop::collection::vec(0u32..64, SIDE * SIDE)
}

/// Mann-Whitney statistic with ties counted as one half.
fn mann_whitney(probs: &[f64], reference: &[f64]) -> f64 {
    let pos: Vec<f64> = probs.iter().zip(reference).filter(|(_, &g)| g == 1.0).map(|(&p, _)| p).collect();
    let neg: Vec<f64> = probs.iter().zip(reference).filter(|(_, &g)| g == 0.0).map(|(&p, _)| p).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_on_the_threshold_grid_is_the_rank_statistic(reference in two_class(), ks in grid_probs()) {
        let probs: Vec<f64> = ks.iter().map(|&k| k as f64 / 255.0).collect();
        let a = auc(&map(&probs), &map(&reference)).unwrap();
        prop_assert!(!a.degenerate);
        prop_assert!((a.value - mann_whitney(&probs, &reference)).abs() < 1e-12);
        // Any strictly increasing relabelling of the scores leaves it unchanged.
        let cubed: Vec<f64> = ks.iter().map(|&k| (k * k * k) as f64 / (63.0 * 63.0 * 63.0)).collect();
        prop_assert!((mann_whitney(&cubed, &reference) - mann_whitney(&probs, &reference)).abs() < 1e-12);
        let spread: Vec<f64> = ks.iter().map(|&k| (4 * k) as f64 / 255.0).collect();
        prop_assert!((auc(&map(&spread), &map(&reference)).unwrap().value - a.value).abs() < 1e-12);
    }

    #[test]
    fn e_measure_bounds_identity_and_complement(reference in two_class(), pred in two_class()) {
        let g = bools(&map(&reference));
        let p = bools(&map(&pred));
        let e = e_measure_binary(&p, &g);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&e));
        prop_assert!((e_measure_binary(&g, &g) - 1.0).abs() < 1e-12);
        let flipped: Vec<bool> = g.iter().map(|b| !b).collect();
        prop_assert!(e_measure_binary(&flipped, &g).abs() < 1e-12);
    }

    #[test]
    fn count_metrics_agree_with_each_other(reference in two_class(), pred in two_class()) {
        let (p, g) = (map(&pred), map(&reference));
        let c = confusion(&p, &g).unwrap();
        prop_assert_eq!(c.total() as usize, SIDE * SIDE);
        let b = basic_metrics(&c);
        prop_assert!((b.jaccard - b.f1 / (2.0 - b.f1)).abs() < 1e-12);
        let f = weighted_fscore(&p, &g, 1.0, Weighting::Uniform).unwrap();
        prop_assert!((f.value - b.f1).abs() < 1e-12);
        prop_assert!((mae(&p, &g).unwrap() - (c.fp + c.fn_) as f64 / c.total() as f64).abs() < 1e-12);
        prop_assert!((b.acc - 1.0 + mae(&p, &g).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_perfectly(reference in two_class()) {
        let g = map(&reference);
        let r = evaluate_image(&g, &g).unwrap();
        prop_assert_eq!((r.se, r.sp, r.acc, r.f1, r.jaccard, r.fbw, r.mae), (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0));
        prop_assert!((r.auc - 1.0).abs() < 1e-12);
        prop_assert!((r.e_phi_max - 1.0).abs() < 1e-12);
        prop_assert!((r.s_alpha - 1.0).abs() < 1e-9);
        prop_assert!(!r.degenerate.any());
    }

    #[test]
    fn soft_scores_stay_in_range(reference in two_class(), ks in grid_probs()) {
        let probs = map(&ks.iter().map(|&k| k as f64 / 63.0).collect::<Vec<_>>());
        let g = map(&reference);
        let s = s_alpha(&probs, &g, 0.5).unwrap();
        let e = e_phi_max(&probs, &g).unwrap();
        prop_assert!((0.0..=1.0).contains(&s) && (0.0..=1.0 + 1e-12).contains(&e));
    }
}

#[test]
fn adding_a_false_positive_can_raise_the_e_measure() {
    // Reference has one foreground pixel in four. Predicting nothing aligns
    // no pixel (each scores 1/4); flagging a wrong pixel makes the two true
    // negatives align perfectly: (0.04 + 1 + 1 + 0.04) / 4.
    let g = [true, false, false, false];
    let none = e_measure_binary(&[false; 4], &g);
    let wrong = e_measure_binary(&[false, false, false, true], &g);
    assert!((none - 0.25).abs() < 1e-12, "{none}");
    assert!((wrong - 0.52).abs() < 1e-12, "{wrong}");
}

#[test]
fn empty_maps_are_flagged() {
    let zero = map(&[0.0; SIDE * SIDE]);
    let f = weighted_fscore(&zero, &zero, 1.0, Weighting::Uniform).unwrap();
    assert_eq!((f.value, f.degenerate), (0.0, true));
    let b = basic_metrics(&confusion(&zero, &zero).unwrap());
    assert_eq!((b.f1, b.se, b.sp), (1.0, 1.0, 1.0));
    assert!(b.degenerate.f1 && b.degenerate.se && !b.degenerate.sp);
    let a = auc(&zero, &zero).unwrap();
    assert_eq!((a.value, a.degenerate), (0.5, true));
    // With a foreground-only reference the E-measure is the foreground rate.
    let one = [true; 4];
    assert_eq!(e_measure_binary(&[true, true, false, false], &one), 0.5);
}

#[test]
fn gaussian_weighting_tolerates_near_misses_more_than_far_ones() {
    let mut reference = vec![0.0; SIDE * SIDE];
    for r in 2..5 {
        for c in 2..5 {
            reference[r * SIDE + c] = 1.0;
        }
    }
    let shifted = |dr: usize| {
        let mut p = vec![0.0; SIDE * SIDE];
        for r in 2..5 {
            for c in 2..5 {
                p[(r + dr) * SIDE + c] = 1.0;
            }
        }
        map(&p)
    };
    let g = map(&reference);
    let w = |d| weighted_fscore(&shifted(d), &g, 1.0, Weighting::GAUSSIAN_DEFAULT).unwrap().value;
    assert!((w(0) - 1.0).abs() < 1e-9);
    assert!(w(1) > w(3), "{} vs {}", w(1), w(3));
    assert!(weighted_fscore(&g, &g, 0.0, Weighting::Uniform).is_err());
}

#[test]
fn non_binary_references_are_rejected() {
    let mut v = vec![0.0; SIDE * SIDE];
    v[0] = 0.5;
    let half = map(&v);
    assert!(confusion(&half, &half).is_err());
    assert!(auc(&half, &half).is_err());
    let wrong_shape = Tensor::new(vec![1, 1, 4, 4], vec![0.0; 16]).unwrap();
    assert!(evaluate_image(&half, &wrong_shape).is_err());
}
