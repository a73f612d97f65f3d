//! Contrastive pretraining on synthetic sequences: 200 combined-mode steps,
//! the loss curve per term, and how well positives separate from negatives
//! on unseen scenes before and after.
//!
//! ```text
//! cargo run --release --example pretrain
//! ```

use timclr::data::{generate_synthetic, Split, SynthConfig};
use timclr::pipeline::pretrain::loss_window_means;
use timclr::pipeline::{alignment, PretrainConfig, PretrainSetup, Pretrainer};

fn main() -> timclr::Result<()> {
    let synth = SynthConfig { num_sequences: 8, seed: 1, ..SynthConfig::default() };
    let data = generate_synthetic(&synth, Split::Pretrain)?;
    let held_out = generate_synthetic(&SynthConfig { num_sequences: 4, seed: 99, ..synth }, Split::Test)?;
    let setup = PretrainSetup {
        pretrain: PretrainConfig { steps: Some(200), seed: 0, ..PretrainConfig::default() },
        ..PretrainSetup::default()
    };

    let mut trainer = Pretrainer::new(&setup, &data.dataset)?;
    let before = alignment(trainer.encoders(), &setup, &held_out.dataset, 32, 5)?;
    println!("{:>5} {:>8} {:>8} {:>8} {:>8}", "step", "L_MCL", "rgbd", "rgb->d", "d->rgb");
    while !trainer.is_done() {
        let l = trainer.step()?;
        if l.step % 25 == 0 {
            println!("{:>5} {:>8.3} {:>8.3} {:>8.3} {:>8.3}", l.step, l.loss_mcl, l.loss_rgbd, l.loss_rgb_d, l.loss_d_rgb);
        }
    }
    let after = alignment(trainer.encoders(), &setup, &held_out.dataset, 32, 5)?;
    let (first, last) = loss_window_means(trainer.history(), 20).expect("200 steps logged");
    println!("L_MCL first/last 20-step mean: {first:.3} -> {last:.3} (ratio {:.3})", last / first);
    println!("held-out cosine  positive {:.3} -> {:.3}", before.positive, after.positive);
    println!("                 negative {:.3} -> {:.3}", before.negative, after.negative);
    println!("                 margin   {:.3} -> {:.3}", before.margin(), after.margin());
    Ok(())
}
