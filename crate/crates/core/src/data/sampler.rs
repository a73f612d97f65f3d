use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PairSample, SamplerConfig, SequenceDataset};

/// Draws the anchor uniformly over all frames, then the partner uniformly
/// from the anchor's sequence within `±delta_t` (window clipped at the
/// sequence ends, anchor included).
pub fn sample_pair<'a, R: Rng + ?Sized>(dataset: &'a SequenceDataset, cfg: &SamplerConfig, rng: &mut R) -> PairSample<'a> {
    let total = dataset.num_frames();
    assert!(total > 0, "sample_pair on an empty dataset");
    let mut global = rng.gen_range(0..total);
    let mut seq = &dataset.sequences[0];
    for s in &dataset.sequences {
        if global < s.len() {
            seq = s;
            break;
        }
        global -= s.len();
    }
    let anchor = global;
    let lo = anchor.saturating_sub(cfg.delta_t);
    let hi = (anchor + cfg.delta_t).min(seq.len() - 1);
    let partner = rng.gen_range(lo..=hi);
    PairSample {
        view1: &seq[anchor],
        view2: &seq[partner],
    }
}

/// A sampler owning its random stream.
pub struct PairSampler<'a> {
    dataset: &'a SequenceDataset,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl<'a> PairSampler<'a> {
    pub fn new(dataset: &'a SequenceDataset, cfg: SamplerConfig) -> Self {
        Self {
            dataset,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    pub fn next_pair(&mut self) -> PairSample<'a> {
        sample_pair(self.dataset, &self.cfg, &mut self.rng)
    }

    /// A single frame drawn uniformly, presented as a pair with itself.
    pub fn next_single(&mut self) -> PairSample<'a> {
        let cfg = SamplerConfig { delta_t: 0, ..self.cfg };
        sample_pair(self.dataset, &cfg, &mut self.rng)
    }
}
