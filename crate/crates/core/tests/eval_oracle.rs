mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timclr::data::{Annotations, BBox};
use timclr::detector::Detection;
use timclr::eval::{average_precision, evaluate, Interpolation, Predictions};

use common::{brute_force_ap, micro_case};

#[test]
fn evaluate_agrees_with_brute_force_on_random_micro_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut scored = 0;
    for case in 0..1000 {
        let (preds, gts) = micro_case(&mut rng);
        let (ap50, ap) = brute_force_ap(&preds, &gts);
        match evaluate(&preds, &gts, Interpolation::Point101) {
            Ok(r) => {
                assert!((r.ap50 - ap50).abs() <= 1e-9, "case {case}: AP50 {} vs oracle {ap50}\n{preds:?}\n{gts:?}", r.ap50);
                assert!((r.ap_50_95 - ap).abs() <= 1e-9, "case {case}: AP {} vs oracle {ap}", r.ap_50_95);
                scored += 1;
            }
            // nothing to score: no boxes on either side
            Err(_) => assert!(gts.values().all(Vec::is_empty) && preds.values().all(Vec::is_empty), "case {case}"),
        }
    }
    assert!(scored > 900, "only {scored} cases had boxes");
}

#[test]
fn false_positive_then_true_positive_scores_one_half() {
    assert_eq!(average_precision(&[false, true], 1, Interpolation::Point101), Some(0.5));

    let gt = BBox::new(10.0, 10.0, 30.0, 30.0, 0);
    let mut gts = Annotations::new();
    gts.insert(("s".into(), 0), vec![gt]);
    let mut preds = Predictions::new();
    preds.insert(
        ("s".into(), 0),
        vec![
            Detection { bbox: BBox::new(40.0, 40.0, 50.0, 50.0, 0), score: 0.9 },
            Detection { bbox: gt, score: 0.7 },
        ],
    );
    let r = evaluate(&preds, &gts, Interpolation::Point101).unwrap();
    assert_eq!(r.ap50, 0.5);
    assert_eq!(brute_force_ap(&preds, &gts).0, 0.5);
}

#[test]
fn overlap_of_exactly_one_half_counts_at_the_first_threshold() {
    // prediction covers the left half of the ground truth: IoU 0.5 exactly
    let gt = BBox::new(0.0, 0.0, 20.0, 10.0, 0);
    let half = BBox::new(0.0, 0.0, 10.0, 10.0, 0);
    assert_eq!(common::oracle_iou(&gt, &half), 0.5);
    let mut gts = Annotations::new();
    gts.insert(("s".into(), 0), vec![gt]);
    let mut preds = Predictions::new();
    preds.insert(("s".into(), 0), vec![Detection { bbox: half, score: 0.5 }]);
    let r = evaluate(&preds, &gts, Interpolation::Point101).unwrap();
    assert_eq!(r.ap50, 1.0);
    assert_eq!(r.per_threshold[1], 0.0);
}

#[test]
fn summary_is_the_mean_over_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (preds, gts) = micro_case(&mut rng);
        if let Ok(r) = evaluate(&preds, &gts, Interpolation::Point101) {
            assert_eq!(r.per_threshold.len(), 10);
            let mean = r.per_threshold.iter().sum::<f64>() / 10.0;
            assert!((r.ap_50_95 - mean).abs() < 1e-15);
            assert!(r.per_threshold.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
