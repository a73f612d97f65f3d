//! Checkpoint persistence: save, reload, re-save byte-identically, and the
//! errors for corrupt files and mismatched architectures.
//!
//! ```text
//! cargo run --example checkpoint
//! ```

use timclr::network::{init_weights, BlockConfig, EncoderPair, FuseLevel};
use timclr::pipeline::{Checkpoint, CheckpointKind, CheckpointMeta};

fn main() -> timclr::Result<()> {
    let cfg = BlockConfig::default();
    let pair = EncoderPair::new(init_weights::<f32>(&cfg, 0), 0.99);
    let meta = CheckpointMeta::new(CheckpointKind::Encoder, cfg.clone(), serde_json::json!({"note": "example"}));
    let bytes = Checkpoint::from_encoders(&pair, meta).to_bytes()?;
    let back = Checkpoint::from_bytes(&bytes)?;
    println!("{} bytes, {} arrays, config hash {}", bytes.len(), back.arrays.len(), &back.meta.config_hash[..12]);
    println!("re-save identical: {}", back.to_bytes()? == bytes);

    let mut corrupt = bytes.clone();
    let mid = corrupt.len() / 2;
    corrupt[mid] ^= 1;
    println!("flipped bit: {}", Checkpoint::from_bytes(&corrupt).unwrap_err());
    println!("truncated:   {}", Checkpoint::from_bytes(&bytes[..bytes.len() - 40]).unwrap_err());

    // same arrays, read against a wider architecture
    let mut other = back.clone();
    other.meta.network = BlockConfig { widths: [8, 24, 32, 64, 128], fuse_at: FuseLevel::C3, ..cfg };
    println!("wider net:   {}", other.to_encoders().unwrap_err());
    Ok(())
}
