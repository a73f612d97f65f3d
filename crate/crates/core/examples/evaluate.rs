//! COCO-style AP on hand-built detections: the score ordering decides
//! precision, and the IoU threshold sweep separates loose from tight boxes.
//!
//! ```text
//! cargo run --example evaluate
//! ```

use timclr::data::{Annotations, BBox};
use timclr::detector::Detection;
use timclr::eval::{average_precision, evaluate, Interpolation, Predictions};

fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
    Detection { bbox: BBox::new(x0, y0, x1, y1, 0), score }
}

fn main() -> timclr::Result<()> {
    // a false positive ranked above the only true positive
    let ap = average_precision(&[false, true], 1, Interpolation::Point101).expect("one gt");
    println!("[FP 0.9, TP 0.7], one gt: AP = {ap:.3}");

    let mut gts = Annotations::new();
    gts.insert(("a".into(), 0), vec![BBox::new(10.0, 10.0, 30.0, 50.0, 0), BBox::new(40.0, 8.0, 60.0, 40.0, 0)]);
    gts.insert(("a".into(), 1), vec![BBox::new(12.0, 12.0, 32.0, 52.0, 0)]);

    let mut preds = Predictions::new();
    // exact, slightly loose, and a duplicate of the first
    preds.insert(("a".into(), 0), vec![det(10.0, 10.0, 30.0, 50.0, 0.95), det(42.0, 10.0, 62.0, 44.0, 0.8), det(11.0, 11.0, 30.0, 50.0, 0.6)]);
    // shifted by a quarter of the width
    preds.insert(("a".into(), 1), vec![det(17.0, 12.0, 37.0, 52.0, 0.7)]);

    let r = evaluate(&preds, &gts, Interpolation::Point101)?;
    println!("AP50 {:.3}  AP@[.5:.95] {:.3}", r.ap50, r.ap_50_95);
    for (t, ap) in r.thresholds.iter().zip(&r.per_threshold) {
        println!("  IoU >= {t:.2}: AP {ap:.3}");
    }
    Ok(())
}
