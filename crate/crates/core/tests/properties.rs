mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timclr::augment::{apply, sample_transform, Jitter, TransformSpec};
use timclr::data::{BBox, DepthImage, RgbImage};
use timclr::detector::{build_detector, detection_loss, forward, DetectorConfig};
use timclr::eval::{average_precision, box_iou, evaluate, Interpolation};
use timclr::gradcheck::{toy_detector_setup, toy_encoder_block};
use timclr::loss::info_nce;
use timclr::network::{encode, init_weights, EncoderPair};
use timclr::tensor::Tensor;

use common::{decode_round_trip_error, micro_case, nms_violations, random_detections};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..60.0f64, 0.0..60.0f64, 0.5..30.0f64, 0.5..30.0f64, 0..3usize).prop_map(|(x, y, w, h, c)| BBox::new(x, y, x + w, y + h, c))
}

fn matrix(n: usize, d: usize) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(-2.0..2.0f64, n * d).prop_map(move |v| Tensor::from_vec(&[n, d], v))
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        prop_assert_eq!(box_iou(&a, &b), box_iou(&b, &a));
        let v = box_iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((box_iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ap_ignores_strictly_monotone_rescaling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts) = micro_case(&mut rng);
        let mut squashed = preds.clone();
        squashed.values_mut().flatten().for_each(|d| d.score = 0.05 + 0.9 * d.score.powi(3));
        let a = evaluate(&preds, &gts, Interpolation::Point101);
        let b = evaluate(&squashed, &gts, Interpolation::Point101);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert!(a.is_err() && b.is_err()),
        }
    }

    #[test]
    fn trailing_false_positive_never_raises_ap(flags in prop::collection::vec(any::<bool>(), 0..12), spare in 0..4usize) {
        let num_gt = flags.iter().filter(|&&t| t).count() + spare;
        prop_assume!(num_gt > 0);
        let before = average_precision(&flags, num_gt, Interpolation::Point101).unwrap();
        let mut more = flags.clone();
        more.push(false);
        let after = average_precision(&more, num_gt, Interpolation::Point101).unwrap();
        prop_assert!(after <= before + 1e-15, "{before} -> {after}");
    }

    #[test]
    fn extra_true_positive_never_lowers_ap(flags in prop::collection::vec(any::<bool>(), 0..12), spare in 1..4usize, at in any::<prop::sample::Index>()) {
        // the new hit matches a ground truth that was missed before
        let num_gt = flags.iter().filter(|&&t| t).count() + spare;
        let before = average_precision(&flags, num_gt, Interpolation::Point101).unwrap();
        let mut more = flags.clone();
        more.insert(at.index(flags.len() + 1), true);
        let after = average_precision(&more, num_gt, Interpolation::Point101).unwrap();
        prop_assert!(after >= before - 1e-15, "{before} -> {after}");
    }

    #[test]
    fn lowest_scoring_stray_box_never_raises_evaluated_ap(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut preds, gts) = micro_case(&mut rng);
        let Ok(before) = evaluate(&preds, &gts, Interpolation::Point101) else { return Ok(()) };
        let floor = preds.values().flatten().map(|d| d.score).fold(1.0, f64::min);
        let key = gts.keys().next().unwrap().clone();
        let class_id = before.per_class[0].class_id;
        // far outside every generated box
        let stray = timclr::detector::Detection { bbox: BBox::new(200.0, 200.0, 210.0, 210.0, class_id), score: floor / 2.0 };
        preds.entry(key).or_default().push(stray);
        let after = evaluate(&preds, &gts, Interpolation::Point101).unwrap();
        prop_assert!(after.ap50 <= before.ap50 + 1e-15 && after.ap_50_95 <= before.ap_50_95 + 1e-15);
    }

    #[test]
    fn info_nce_is_non_negative_and_permutation_invariant(
        (n, q, k) in (1..6usize, 1..5usize).prop_flat_map(|(n, d)| (Just(n), matrix(n, d), matrix(n, d))),
        tau in 0.05..2.0f64,
        seed in any::<u64>(),
    ) {
        let v = info_nce(&q, &k, tau).unwrap().value;
        prop_assert!(v >= 0.0);
        if n == 1 {
            prop_assert_eq!(v, 0.0);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permute = |t: &Tensor<f64>| Tensor::concat(&perm.iter().map(|&i| t.sample(i)).collect::<Vec<_>>());
        let pv = info_nce(&permute(&q), &permute(&k), tau).unwrap().value;
        prop_assert!((v - pv).abs() <= 1e-12 * v.abs().max(1.0), "{v} vs {pv}");
    }

    #[test]
    fn raising_a_positive_similarity_never_raises_info_nce(
        (n, logits) in (2..6usize).prop_flat_map(|n| (Just(n), prop::collection::vec(-3.0..3.0f64, n * n))),
        row in any::<prop::sample::Index>(),
        bump in 0.0..3.0f64,
        tau in 0.1..1.0f64,
    ) {
        // identity keys make q_i·k_j the (i, j) entry of the query matrix,
        // so the positive moves while every negative stays fixed
        let keys = Tensor::from_vec(&[n, n], (0..n * n).map(|i| if i / n == i % n { 1.0 } else { 0.0 }).collect());
        let before = info_nce(&Tensor::from_vec(&[n, n], logits.clone()), &keys, tau).unwrap().value;
        let i = row.index(n);
        let mut raised = logits;
        raised[i * n + i] += bump;
        let after = info_nce(&Tensor::from_vec(&[n, n], raised), &keys, tau).unwrap().value;
        prop_assert!(after <= before + 1e-12, "{before} -> {after}");
    }

    #[test]
    fn inverse_decode_round_trips(cx in 4.0..60.0f64, cy in 4.0..60.0f64, w in 2.0..8.0f64, h in 2.0..8.0f64, s in 0..2usize, a in 0..3usize) {
        let cfg = DetectorConfig::default();
        let b = BBox::from_center(cx, cy, w, h, 0);
        if let Some(err) = decode_round_trip_error(&cfg, &b, s, a) {
            prop_assert!(err <= 1e-6, "error {err}");
        }
    }

    #[test]
    fn nms_postconditions_hold(seed in any::<u64>(), n in 0..40usize, thr in 0.05..0.95f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, n, 3);
        let kept = timclr::detector::nms(&dets, thr);
        let v = nms_violations(&dets, &kept, thr);
        prop_assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn depth_ignores_photometric_parameters(seed in any::<u64>(), b in -0.5..0.5f64, c in -0.5..0.5f64, sat in -0.5..0.5f64, hue in -0.1..0.1f64, gray: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rgb, depth) = random_frame(&mut rng, 40, 30);
        let spec = TransformSpec { output_size: [24, 24], ..TransformSpec::default() };
        let t = sample_transform(&spec, &mut rng);
        let mut varied = t;
        varied.jitter = Some(Jitter { brightness: 1.0 + b, contrast: 1.0 + c, saturation: 1.0 + sat, hue });
        varied.grayscale = gray;
        let v1 = apply(&t, &rgb, &depth).unwrap();
        let v2 = apply(&varied, &rgb, &depth).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&v1.depth), bits(&v2.depth));
    }

    #[test]
    fn augmentation_is_determined_by_spec_and_seed(seed in any::<u64>()) {
        let mut frame_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let (rgb, depth) = random_frame(&mut frame_rng, 32, 32);
        let spec = TransformSpec { output_size: [16, 16], ..TransformSpec::default() };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_transform(&spec, &mut rng);
            (t, apply(&t, &rgb, &depth).unwrap())
        };
        let (t1, v1) = run();
        let (t2, v2) = run();
        prop_assert_eq!(t1, t2);
        prop_assert_eq!(v1, v2);
    }
}

fn random_frame(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (RgbImage, DepthImage) {
    let mut rgb = RgbImage::new(w, h);
    rgb.data.iter_mut().for_each(|v| *v = rng.gen());
    let mut depth = DepthImage::new(w, h);
    depth.data.iter_mut().for_each(|v| *v = rng.gen_range(500..9000));
    (rgb, depth)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn momentum_update_lands_between_key_and_query(seed in any::<u64>(), m in 0.0..1.0f64) {
        let block = toy_encoder_block();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pair = EncoderPair::new(init_weights::<f64>(&block, 0), m);
        let n = pair.q.flatten().len();
        pair.q.assign_flat(&(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        // some coordinates already agree; those must stay put
        let k: Vec<f64> = pair.q.flatten().iter().map(|&q| if rng.gen_bool(0.1) { q } else { rng.gen_range(-1.0..1.0) }).collect();
        pair.k.assign_flat(&k);
        let q = pair.q.flatten();
        pair.momentum_update().unwrap();
        prop_assert_eq!(pair.q.flatten(), q.clone());
        for ((&new, &old), &qv) in pair.k.flatten().iter().zip(&k).zip(&q) {
            if old == qv {
                prop_assert_eq!(new, old);
            } else {
                prop_assert!(new >= old.min(qv) && new <= old.max(qv), "{new} outside [{old}, {qv}]");
            }
        }
    }

    #[test]
    fn detection_loss_ignores_target_order(seed in any::<u64>()) {
        let (block, cfg) = toy_detector_setup();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (det, _) = build_detector::<f64>(None, &block, &cfg, seed).unwrap();
        let [h, w] = block.input_size;
        let rgb = Tensor::from_vec(&[2, 3, h, w], (0..2 * 3 * h * w).map(|_| rng.gen()).collect());
        let depth = Tensor::from_vec(&[2, 1, h, w], (0..2 * h * w).map(|_| rng.gen()).collect());
        let raw = forward(&det, &rgb, &depth).unwrap();
        let targets: Vec<Vec<BBox>> = (0..2)
            .map(|_| {
                (0..rng.gen_range(0..5))
                    .map(|_| {
                        let (x, y) = (rng.gen_range(0.0..12.0), rng.gen_range(0.0..12.0));
                        BBox::new(x, y, x + rng.gen_range(1.0..4.0), y + rng.gen_range(1.0..4.0), rng.gen_range(0..2))
                    })
                    .collect()
            })
            .collect();
        let mut shuffled = targets.clone();
        for t in &mut shuffled {
            t.reverse();
            if t.len() > 2 {
                t.swap(0, 1);
            }
        }
        let a = detection_loss(&raw, &targets, &cfg, block.input_size).unwrap();
        let b = detection_loss(&raw, &shuffled, &cfg, block.input_size).unwrap();
        prop_assert_eq!(a.terms, b.terms);
        for (ga, gb) in a.grads.iter().zip(&b.grads) {
            prop_assert_eq!(ga, gb);
        }
    }
}

#[test]
fn encoder_outputs_are_unit_norm_over_a_thousand_inputs() {
    let block = toy_encoder_block();
    let w = init_weights::<f32>(&block, 3);
    let [h, wd] = block.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for _ in 0..125 {
        let n = 8;
        let rgb = Tensor::from_vec(&[n, 3, h, wd], (0..n * 3 * h * wd).map(|_| rng.gen()).collect());
        let depth = Tensor::from_vec(&[n, 1, h, wd], (0..n * h * wd).map(|_| rng.gen()).collect());
        let reps = encode(&w, &rgb, &depth).unwrap();
        for t in [&reps.rgbd, &reps.rgb, &reps.d] {
            for i in 0..n {
                let norm = t.row(i).iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
                worst = worst.max((norm - 1.0).abs());
            }
        }
    }
    assert!(worst <= 1e-5, "max deviation {worst}");
}
