//! Second stage: a detector initialized from a briefly pretrained encoder
//! and one from scratch, trained on the same frames and scored on a
//! held-out split. Ends with the detections of one test frame.
//!
//! ```text
//! cargo run --release --example finetune_detect
//! ```

use timclr::data::{generate_synthetic, Split, SynthConfig};
use timclr::detector::{detect, DetectorConfig};
use timclr::tensor::Tensor;
use timclr::pipeline::{evaluate_detector, finetune, pretrain, FinetuneConfig, InitMode, PretrainConfig, PretrainSetup};

fn main() -> timclr::Result<()> {
    let synth = SynthConfig { num_sequences: 8, seed: 1, ..SynthConfig::default() };
    let pre = generate_synthetic(&synth, Split::Pretrain)?;
    let train = generate_synthetic(&SynthConfig { num_sequences: 4, frames_per_sequence: 10, seed: 2, ..synth.clone() }, Split::Train)?.annotated();
    let test = generate_synthetic(&SynthConfig { num_sequences: 4, frames_per_sequence: 10, seed: 3, ..synth }, Split::Test)?.annotated();

    let setup = PretrainSetup {
        pretrain: PretrainConfig { steps: Some(100), ..PretrainConfig::default() },
        ..PretrainSetup::default()
    };
    let encoders = pretrain(&setup, &pre.dataset)?.encoders;
    let det = DetectorConfig::default();

    let mut last = None;
    for init in [InitMode::Timclr, InitMode::Random] {
        let cfg = FinetuneConfig {
            steps: Some(300),
            init_mode: init,
            eval_every: 100,
            ..FinetuneConfig::default()
        };
        let out = finetune(&train, Some(&test), Some(&encoders.q), &setup.network, &det, &cfg)?;
        let curve: Vec<String> = out.evals.iter().map(|e| format!("{}:{:.3}", e.step, e.ap50)).collect();
        let r = evaluate_detector(&out.weights, &test, cfg.eval_conf_threshold)?;
        println!("{init:>6} init: held-out AP50 {:.3}, AP {:.3}  (curve {})", r.ap50, r.ap_50_95, curve.join(" "));
        if init == InitMode::Timclr {
            println!("        {} backbone arrays transferred, {} fresh", out.transfer.copied.len(), out.transfer.fresh.len());
        }
        last = Some(out.weights);
    }

    let w = last.expect("two runs");
    let frame = &test[0];
    let (rgb, depth) = frame.frame.to_tensors::<f32>();
    let dets = detect(&w, &Tensor::stack(&[rgb]), &Tensor::stack(&[depth]))?;
    println!("frame {}:{}", frame.frame.seq_id, frame.frame.frame_idx);
    for b in &frame.boxes {
        println!("  truth      ({:.1}, {:.1}) .. ({:.1}, {:.1})", b.x_min, b.y_min, b.x_max, b.y_max);
    }
    for d in &dets[0] {
        println!("  score {:.2} ({:.1}, {:.1}) .. ({:.1}, {:.1})", d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max);
    }
    Ok(())
}
