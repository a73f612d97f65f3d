#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use timclr::data::{Annotations, BBox};
use timclr::detector::{decode, inverse_decode, nms, Detection, DetectorConfig, RawPrediction};
use timclr::eval::Predictions;
use timclr::tensor::Tensor;

/// Overlap computed from scratch: intersection extents clamped at zero.
pub fn oracle_iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let area = |x: &BBox| (x.x_max - x.x_min) * (x.y_max - x.y_min);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// COCO-style AP by brute force. For every class and threshold, each
/// distinct score is tried as a cut-off; the operating points (recall,
/// precision) of all cut-offs are enumerated, and the precision at recall
/// level r is the best precision among cut-offs reaching recall >= r.
/// Requires distinct scores within a class.
pub fn brute_force_ap(preds: &Predictions, gts: &Annotations) -> (f64, f64) {
    let mut classes: Vec<usize> = gts.values().flatten().map(|b| b.class_id).collect();
    classes.extend(preds.values().flatten().map(|d| d.bbox.class_id));
    classes.sort_unstable();
    classes.dedup();
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_threshold = vec![0.0; thresholds.len()];
    for &c in &classes {
        for (ti, &thr) in thresholds.iter().enumerate() {
            // per-prediction outcome under greedy score-ordered matching
            let mut outcomes: Vec<(f64, bool)> = Vec::new();
            let mut num_gt = 0usize;
            for (key, frame_gts) in gts {
                let g: Vec<&BBox> = frame_gts.iter().filter(|b| b.class_id == c).collect();
                num_gt += g.len();
                let mut p: Vec<&Detection> = preds.get(key).map(|v| v.iter().filter(|d| d.bbox.class_id == c).collect()).unwrap_or_default();
                p.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let mut taken = vec![false; g.len()];
                for d in p {
                    let mut best = None;
                    let mut best_iou = thr;
                    for (k, gt) in g.iter().enumerate() {
                        let v = oracle_iou(&d.bbox, gt);
                        if !taken[k] && v >= best_iou && best.map_or(true, |_| v > best_iou) {
                            best = Some(k);
                            best_iou = v;
                        }
                    }
                    if let Some(k) = best {
                        taken[k] = true;
                    }
                    outcomes.push((d.score, best.is_some()));
                }
            }
            if num_gt == 0 {
                // false positives only: zero AP, but the class still counts
                continue;
            }
            let points: Vec<(usize, f64)> = outcomes
                .iter()
                .map(|&(cut, _)| {
                    let kept: Vec<bool> = outcomes.iter().filter(|o| o.0 >= cut).map(|o| o.1).collect();
                    let tp = kept.iter().filter(|&&t| t).count();
                    (tp, tp as f64 / kept.len() as f64)
                })
                .collect();
            let mut sum = 0.0;
            for r in 0..=100usize {
                let best = points
                    .iter()
                    .filter(|(tp, _)| tp * 100 >= r * num_gt)
                    .map(|p| p.1)
                    .fold(0.0f64, f64::max);
                sum += best;
            }
            per_threshold[ti] += sum / 101.0;
        }
    }
    let n = classes.len() as f64;
    let ap50 = per_threshold[0] / n;
    let ap = per_threshold.iter().sum::<f64>() / (n * thresholds.len() as f64);
    (ap50, ap)
}

/// A box of a random class below `classes`.
fn random_box(rng: &mut impl Rng, classes: usize) -> BBox {
    let class_id = rng.gen_range(0..classes);
    let x = rng.gen_range(0.0..50.0);
    let y = rng.gen_range(0.0..50.0);
    BBox::new(x, y, x + rng.gen_range(2.0..14.0), y + rng.gen_range(2.0..14.0), class_id)
}

/// Nudges every coordinate by up to `jitter` pixels.
fn near(rng: &mut impl Rng, b: &BBox, jitter: f64) -> BBox {
    let mut d = || rng.gen_range(-jitter..=jitter);
    let (x0, y0) = (b.x_min + d(), b.y_min + d());
    BBox::new(x0, y0, (b.x_max + d()).max(x0 + 0.5), (b.y_max + d()).max(y0 + 0.5), b.class_id)
}

/// A micro evaluation case: up to 3 frames, up to 2 classes, at most 5
/// ground truths and 10 predictions overall, scores distinct. Predictions
/// are mostly perturbed ground truths so every IoU threshold is exercised.
pub fn micro_case(rng: &mut impl Rng) -> (Predictions, Annotations) {
    let frames = rng.gen_range(1..=3);
    let classes = rng.gen_range(1..=2);
    let num_gt = rng.gen_range(0..=5);
    let num_pred = rng.gen_range(0..=10);
    let mut gts = Annotations::new();
    for f in 0..frames {
        gts.insert(("s".to_string(), f), Vec::new());
    }
    for _ in 0..num_gt {
        let f = rng.gen_range(0..frames);
        let b = random_box(rng, classes);
        gts.get_mut(&("s".to_string(), f)).unwrap().push(b);
    }
    let mut scores: Vec<f64> = Vec::new();
    while scores.len() < num_pred {
        let s: f64 = rng.gen_range(0.01..1.0);
        if scores.iter().all(|&x| (x - s).abs() > 1e-9) {
            scores.push(s);
        }
    }
    let all_gts: Vec<(usize, BBox)> = gts.iter().flat_map(|(k, v)| v.iter().map(move |b| (k.1, *b))).collect();
    let mut preds = Predictions::new();
    for score in scores {
        let (f, bbox) = if !all_gts.is_empty() && rng.gen_bool(0.75) {
            let (f, g) = all_gts[rng.gen_range(0..all_gts.len())];
            let jitter = rng.gen_range(0.0..4.0);
            let mut b = near(rng, &g, jitter);
            if rng.gen_bool(0.1) {
                b.class_id = rng.gen_range(0..classes);
            }
            (f, b)
        } else {
            (rng.gen_range(0..frames), random_box(rng, classes))
        };
        preds.entry(("s".to_string(), f)).or_default().push(Detection { bbox, score });
    }
    (preds, gts)
}

/// Random detections, some clustered so suppression has work to do.
pub fn random_detections(rng: &mut impl Rng, n: usize, classes: usize) -> Vec<Detection> {
    let mut out: Vec<Detection> = Vec::with_capacity(n);
    for _ in 0..n {
        let bbox = match out.last() {
            Some(prev) if rng.gen_bool(0.5) => near(rng, &prev.bbox, 3.0),
            _ => random_box(rng, classes),
        };
        out.push(Detection { bbox, score: rng.gen_range(0.0..1.0) });
    }
    out
}

/// Subset, non-increasing scores, no kept same-class pair above the
/// threshold, and every dropped detection explained by a kept one.
pub fn nms_violations(input: &[Detection], kept: &[Detection], thr: f64) -> Vec<String> {
    let mut v = Vec::new();
    for k in kept {
        if !input.contains(k) {
            v.push(format!("kept {k:?} is not an input"));
        }
    }
    for w in kept.windows(2) {
        if w[1].score > w[0].score {
            v.push("scores increase".into());
        }
    }
    for (i, a) in kept.iter().enumerate() {
        for b in &kept[i + 1..] {
            if a.bbox.class_id == b.bbox.class_id && oracle_iou(&a.bbox, &b.bbox) > thr {
                v.push(format!("kept pair overlaps at {}", oracle_iou(&a.bbox, &b.bbox)));
            }
        }
    }
    for d in input.iter().filter(|d| !kept.contains(d)) {
        let explained = kept
            .iter()
            .any(|k| k.bbox.class_id == d.bbox.class_id && k.score >= d.score && oracle_iou(&k.bbox, &d.bbox) > thr);
        if !explained {
            v.push(format!("dropped {d:?} without a suppressor"));
        }
    }
    v
}

pub fn nms_checked(input: &[Detection], thr: f64) -> Result<Vec<Detection>, Vec<String>> {
    let kept = nms(input, thr);
    let v = nms_violations(input, &kept, thr);
    if v.is_empty() {
        Ok(kept)
    } else {
        Err(v)
    }
}

/// Raw head outputs of one 64×64 image with every objectness logit at
/// `-30` except the one slot encoding `bbox` under anchor `a` of scale `s`.
/// Returns the largest corner error after decoding, or `None` when the box
/// centre lies on a cell edge.
pub fn decode_round_trip_error(cfg: &DetectorConfig, bbox: &BBox, s: usize, a: usize) -> Option<f64> {
    let ((i, j), t) = inverse_decode(bbox, cfg.anchors[s][a], cfg.strides[s])?;
    let slot = cfg.slot();
    let c = cfg.num_anchors() * slot;
    let mut scales: Vec<Tensor<f64>> = [8usize, 4]
        .iter()
        .map(|&g| {
            let mut t = Tensor::zeros(&[1, c, g, g]);
            for an in 0..cfg.num_anchors() {
                for p in 0..g * g {
                    t.data_mut()[(an * slot + 4) * g * g + p] = -30.0;
                }
            }
            t
        })
        .collect();
    let g = scales[s].shape()[2];
    for (k, v) in t.iter().chain([30.0, 30.0].iter()).enumerate() {
        scales[s].data_mut()[((a * slot + k) * g + i) * g + j] = *v;
    }
    let dets = decode(&RawPrediction { scales }, 0, cfg, [64, 64]).expect("decode");
    let [d] = dets.as_slice() else {
        return Some(f64::INFINITY);
    };
    let b = d.bbox;
    Some(
        [b.x_min - bbox.x_min, b.y_min - bbox.y_min, b.x_max - bbox.x_max, b.y_max - bbox.y_max]
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs())),
    )
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn class_counts(boxes: &[BBox]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for b in boxes {
        *m.entry(b.class_id).or_insert(0) += 1;
    }
    m
}
