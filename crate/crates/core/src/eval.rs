//! IoU, greedy score-ordered matching and COCO-style average precision.
//!
//! A prediction matches at threshold `t` when `IoU ≥ t`. AP is computed per
//! class over the pooled dataset, averaged over classes (macro), and then
//! over the thresholds `0.50, 0.55, …, 0.95`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Annotations, BBox};
use crate::detector::Detection;
use crate::error::{Error, Result};

/// IoU thresholds of AP@[.5:.95].
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// IoU without validation; zero when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if !bx.is_valid() {
            return Err(Error::Eval(format!("degenerate box {bx:?}")));
        }
    }
    Ok(box_iou(a, b))
}

/// Matching outcome, predictions in descending score order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matches {
    pub scores: Vec<f64>,
    pub tp: Vec<bool>,
    pub num_gt: usize,
}

/// Greedy matching by descending score (ties keep input order). Each
/// prediction takes the unmatched same-class ground truth of highest IoU
/// (lowest index on ties) when that IoU is at least `iou_thr`.
pub fn match_detections(preds: &[Detection], gts: &[BBox], iou_thr: f64) -> Matches {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.class_id != preds[p].class_id() {
                continue;
            }
            let v = box_iou(&preds[p].bbox, gt);
            if v >= iou_thr && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        tp.push(best.is_some());
    }
    Matches {
        scores: order.iter().map(|&i| preds[i].score).collect(),
        tp,
        num_gt: gts.len(),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Mean interpolated precision at recall `0.00, 0.01, …, 1.00`.
    #[default]
    Point101,
    /// Area under the interpolated precision envelope at every recall step.
    AllPoint,
}

/// AP of a ranked list of TP/FP flags. `None` when there is nothing to
/// score (no ground truth and no predictions); `0` when only false
/// positives exist.
pub fn average_precision(tp: &[bool], num_gt: usize, interp: Interpolation) -> Option<f64> {
    if num_gt == 0 {
        return if tp.is_empty() { None } else { Some(0.0) };
    }
    let mut hits = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut count = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        count += t as usize;
        hits.push(count);
        precision.push(count as f64 / (k + 1) as f64);
    }
    // interpolated precision: running max from the right
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    Some(match interp {
        Interpolation::Point101 => {
            let mut sum = 0.0;
            let mut k = 0;
            for r in 0..=100usize {
                // first rank whose recall ≥ r/100, compared in integers
                while k < hits.len() && 100 * hits[k] < r * num_gt {
                    k += 1;
                }
                if k < hits.len() {
                    sum += precision[k];
                }
            }
            sum / 101.0
        }
        Interpolation::AllPoint => {
            let mut area = 0.0;
            let mut prev = 0usize;
            for k in 0..hits.len() {
                if hits[k] > prev {
                    area += (hits[k] - prev) as f64 / num_gt as f64 * precision[k];
                    prev = hits[k];
                }
            }
            area
        }
    })
}

/// Predictions keyed like [`Annotations`].
pub type Predictions = BTreeMap<(String, usize), Vec<Detection>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    /// AP at each threshold of [`coco_thresholds`].
    pub per_threshold: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub ap50: f64,
    pub ap_50_95: f64,
    pub thresholds: Vec<f64>,
    /// Class-averaged AP at each threshold.
    pub per_threshold: Vec<f64>,
    pub per_class: Vec<ClassAp>,
}

/// Macro-averaged AP over the pooled frames. Frames missing from `preds`
/// count as having no detections.
pub fn evaluate(preds: &Predictions, gts: &Annotations, interp: Interpolation) -> Result<EvalResult> {
    if let Some(key) = preds.keys().find(|k| !gts.contains_key(*k)) {
        return Err(Error::Eval(format!("prediction for unknown frame {}:{}", key.0, key.1)));
    }
    let classes: BTreeSet<usize> = gts
        .values()
        .flatten()
        .map(|b| b.class_id)
        .chain(preds.values().flatten().map(Detection::class_id))
        .collect();
    let thresholds = coco_thresholds();
    let empty = Vec::new();
    let mut per_class = Vec::new();
    for &c in &classes {
        let mut aps = Vec::with_capacity(thresholds.len());
        for &thr in &thresholds {
            let mut ranked: Vec<(f64, bool)> = Vec::new();
            let mut num_gt = 0;
            for (key, frame_gts) in gts {
                let p: Vec<Detection> = preds.get(key).unwrap_or(&empty).iter().filter(|d| d.class_id() == c).copied().collect();
                let g: Vec<BBox> = frame_gts.iter().filter(|b| b.class_id == c).copied().collect();
                let m = match_detections(&p, &g, thr);
                num_gt += m.num_gt;
                ranked.extend(m.scores.into_iter().zip(m.tp));
            }
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
            let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
            aps.push(average_precision(&flags, num_gt, interp));
        }
        if let Some(per_threshold) = aps.into_iter().collect::<Option<Vec<f64>>>() {
            per_class.push(ClassAp { class_id: c, per_threshold });
        }
    }
    if per_class.is_empty() {
        return Err(Error::Eval("no ground truth and no predictions to evaluate".into()));
    }
    let per_threshold: Vec<f64> = (0..thresholds.len())
        .map(|t| per_class.iter().map(|c| c.per_threshold[t]).sum::<f64>() / per_class.len() as f64)
        .collect();
    Ok(EvalResult {
        ap50: per_threshold[0],
        ap_50_95: per_threshold.iter().sum::<f64>() / per_threshold.len() as f64,
        thresholds,
        per_threshold,
        per_class,
    })
}

/// Rows `dataset,split,class,threshold,AP`, one per class and threshold,
/// followed by class `all` rows per threshold and the `AP50` and
/// `AP@[.5:.95]` summary rows.
pub fn write_eval_csv(path: &Path, result: &EvalResult, dataset: &str, split: &str) -> Result<()> {
    let mut out = String::from("dataset,split,class,threshold,AP\n");
    for c in &result.per_class {
        for (t, ap) in result.thresholds.iter().zip(&c.per_threshold) {
            out += &format!("{dataset},{split},{},{t:.2},{ap:.6}\n", c.class_id);
        }
    }
    for (t, ap) in result.thresholds.iter().zip(&result.per_threshold) {
        out += &format!("{dataset},{split},all,{t:.2},{ap:.6}\n");
    }
    out += &format!("{dataset},{split},all,AP50,{:.6}\n", result.ap50);
    out += &format!("{dataset},{split},all,AP@[.5:.95],{:.6}\n", result.ap_50_95);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
