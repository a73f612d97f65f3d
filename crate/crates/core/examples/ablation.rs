//! The ablation matrix at toy scale: pairing mode, fusion level and the
//! crossmodal terms, each varied alone around the base setup with a shared
//! seed set. Writes `ablation.csv` and its metadata.
//!
//! ```text
//! cargo run --release --example ablation [-- OUT_DIR]
//! ```

use std::path::PathBuf;

use timclr::augment::TransformSpec;
use timclr::data::{generate_synthetic, Split, SynthConfig};
use timclr::detector::DetectorConfig;
use timclr::network::BlockConfig;
use timclr::pipeline::ablation::FULL_SCALE_REFERENCE;
use timclr::pipeline::{run_ablation, AblationSetup, FinetuneConfig, PretrainConfig, PretrainSetup};

fn main() -> timclr::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("timclr-ablation-example"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| timclr::Error::Dataset(e.to_string()))?;
    let synth = SynthConfig { num_sequences: 4, frames_per_sequence: 40, seed: 5, ..SynthConfig::default() };
    let pre = generate_synthetic(&synth, Split::Pretrain)?;
    let train = generate_synthetic(&SynthConfig { frames_per_sequence: 6, seed: 6, ..synth.clone() }, Split::Train)?.annotated();
    let test = generate_synthetic(&SynthConfig { frames_per_sequence: 6, seed: 7, ..synth }, Split::Test)?.annotated();

    let network = BlockConfig { widths: [8, 16, 16, 32, 32], rep_dim: 16, ..BlockConfig::default() };
    let base = PretrainSetup {
        network,
        augment: TransformSpec::default(),
        pretrain: PretrainConfig { steps: Some(30), batch_size: 8, ..PretrainConfig::default() },
        ..PretrainSetup::default()
    };
    let finetune = FinetuneConfig { steps: Some(60), ..FinetuneConfig::default() };
    let setup = AblationSetup::new(base, DetectorConfig::default(), finetune, vec![0, 1]);

    let report = run_ablation(&setup, &pre.dataset, &train, &test, |m| eprintln!("training {m}"))?;
    println!("{} distinct runs for {} rows", report.runs_trained, report.rows.len());
    println!("{:<11} {:<14} {:>7} {:>7}   full-scale AP/AP50 (%)", "axis", "variant", "AP", "AP50");
    for r in &report.rows {
        let reference = FULL_SCALE_REFERENCE.iter().find(|x| x.0 == r.axis.as_str() && x.1 == r.variant).expect("reference row");
        println!("{:<11} {:<14} {:>7.3} {:>7.3}   {:.1}/{:.1}", r.axis.as_str(), r.variant, r.ap, r.ap50, reference.2, reference.3);
    }
    report.write_csv(&out.join("ablation.csv"))?;
    report.write_metadata(&out.join("ablation_meta.json"), &setup)?;
    println!("written to {}", out.display());
    Ok(())
}
