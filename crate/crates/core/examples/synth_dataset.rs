//! Generates a small synthetic RGB-D split, writes it in the on-disk layout
//! and loads it back.
//!
//! ```text
//! cargo run --release --example synth_dataset [-- OUT_DIR]
//! ```

use std::path::PathBuf;

use timclr::data::{generate_synthetic, load_annotated, write_split, Split, SynthConfig};

fn main() -> timclr::Result<()> {
    let root = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("timclr-synth-example"), PathBuf::from);
    let cfg = SynthConfig {
        num_sequences: 3,
        frames_per_sequence: 30,
        seed: 7,
        ..SynthConfig::default()
    };
    let data = generate_synthetic(&cfg, Split::Train)?;
    write_split(&root, &data.dataset, Some(&data.boxes))?;

    let back = load_annotated(&root, Split::Train)?;
    println!("wrote {} frames to {}", back.len(), root.display());
    for seq in &data.dataset.sequences {
        let first = &seq[0];
        let depths: Vec<u16> = first.depth.data.iter().copied().filter(|&d| d > 0).collect();
        let (near, far) = (depths.iter().min().unwrap(), depths.iter().max().unwrap());
        println!("{}: {} frames, depth {near}..{far} mm", first.seq_id, seq.len());
    }
    let boxes: usize = back.iter().map(|f| f.boxes.len()).sum();
    println!("{boxes} labelled boxes, {:.2} per frame", boxes as f64 / back.len() as f64);
    for b in &back[0].boxes {
        println!("  frame 0 box ({:.1}, {:.1}) .. ({:.1}, {:.1})", b.x_min, b.y_min, b.x_max, b.y_max);
    }
    Ok(())
}
