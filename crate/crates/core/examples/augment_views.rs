//! Draws temporal pairs and augments both views with synchronized RGB-D
//! transforms. Writes the views as PNGs for inspection.
//!
//! ```text
//! cargo run --release --example augment_views [-- OUT_DIR]
//! ```

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timclr::augment::{make_views, TransformSpec, View};
use timclr::data::{generate_synthetic, write_depth, write_rgb, DepthImage, PairSampler, RgbImage, SamplerConfig, Split, SynthConfig, DEPTH_SCALE_MM};

fn to_images(v: &View) -> (RgbImage, DepthImage) {
    let (h, w) = (v.rgb.shape()[1], v.rgb.shape()[2]);
    let plane = h * w;
    let mut rgb = RgbImage::new(w, h);
    let mut depth = DepthImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = |c: usize| (v.rgb.data()[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8;
            rgb.put(x, y, [px(0), px(1), px(2)]);
            depth.data[i] = (v.depth.data()[i] as f64 * DEPTH_SCALE_MM).round() as u16;
        }
    }
    (rgb, depth)
}

fn main() -> timclr::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("timclr-augment-example"), PathBuf::from);
    std::fs::create_dir_all(&out).map_err(|e| timclr::Error::Dataset(e.to_string()))?;
    let data = generate_synthetic(&SynthConfig { num_sequences: 2, frames_per_sequence: 60, seed: 3, ..SynthConfig::default() }, Split::Pretrain)?;
    let mut sampler = PairSampler::new(&data.dataset, SamplerConfig { delta_t: 20, seed: 1 });
    let spec = TransformSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..4 {
        let pair = sampler.next_pair();
        let views = make_views(&pair, &spec, &mut rng)?;
        println!(
            "pair {k}: {} frame {} with frame {} (|dt| = {})",
            pair.view1.seq_id,
            pair.view1.frame_idx,
            pair.view2.frame_idx,
            pair.view1.frame_idx.abs_diff(pair.view2.frame_idx)
        );
        for (i, v) in [&views.view1, &views.view2].into_iter().enumerate() {
            let (rgb, depth) = to_images(v);
            write_rgb(&out.join(format!("pair{k}_view{}_rgb.png", i + 1)), &rgb)?;
            write_depth(&out.join(format!("pair{k}_view{}_depth.png", i + 1)), &depth)?;
        }
    }
    println!("views written to {}", out.display());
    Ok(())
}
