use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use super::optim::{cosine_lr, Sgd};
use super::{derive_seed, stack_views, stream};
use crate::augment::{apply, make_views, Transform, TransformSpec, View};
use crate::data::{PairSampler, SamplerConfig, SequenceDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{mcl_node, LossConfig, LossTerms};
use crate::network::{encode, encode_graph, init_weights, BlockConfig, EncoderPair, EncoderWeights};
use crate::tensor::Tensor;

/// How the two views of a positive pair are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    /// One frame, two random transforms.
    AugmentOnly,
    /// Two frames of a sequence, resized only.
    TemporalOnly,
    /// Two frames of a sequence, each with its own random transform.
    #[default]
    Combined,
}

impl PairingMode {
    pub const ALL: [PairingMode; 3] = [PairingMode::AugmentOnly, PairingMode::TemporalOnly, PairingMode::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            PairingMode::AugmentOnly => "augment_only",
            PairingMode::TemporalOnly => "temporal_only",
            PairingMode::Combined => "combined",
        }
    }
}

impl fmt::Display for PairingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PairingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pairing mode `{s}` (augment_only, temporal_only, combined)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub pairing: PairingMode,
    /// When off, both crossmodal weights are zeroed.
    pub crossmodal: bool,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Cosine decay of `lr` to zero over the run.
    pub cosine: bool,
    /// Momentum-encoder coefficient.
    pub m: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps: None,
            batch_size: 16,
            pairing: PairingMode::Combined,
            crossmodal: true,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            cosine: true,
            m: 0.99,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 && self.steps.is_none() {
            return Err(Error::Config("pretrain: epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            // a single sample has no negatives
            return Err(Error::Config("pretrain: batch_size must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("pretrain: lr, momentum and weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::Config(format!("pretrain: m = {} outside [0,1]", self.m)));
        }
        Ok(())
    }
}

/// Everything that determines a pretraining run besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSetup {
    pub sampler: SamplerConfig,
    pub augment: TransformSpec,
    pub network: BlockConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
}

impl PretrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        self.pretrain.validate()?;
        if self.augment.output_size != self.network.input_size {
            return Err(Error::Config(format!(
                "augment.output_size {:?} differs from network.input_size {:?}",
                self.augment.output_size, self.network.input_size
            )));
        }
        Ok(())
    }

    /// The loss weights actually optimized.
    pub fn effective_loss(&self) -> LossConfig {
        if self.pretrain.crossmodal {
            self.loss.clone()
        } else {
            self.loss.clone().without_crossmodal()
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_mcl: f64,
    pub loss_rgbd: f64,
    pub loss_rgb_d: f64,
    pub loss_d_rgb: f64,
    pub lr: f64,
}

impl StepLog {
    fn new(step: usize, t: LossTerms, lr: f64) -> Self {
        Self {
            step,
            loss_mcl: t.mcl,
            loss_rgbd: t.rgbd,
            loss_rgb_d: t.rgb_d,
            loss_d_rgb: t.d_rgb,
            lr,
        }
    }
}

pub fn write_step_log(path: &Path, logs: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,loss_mcl,loss_rgbd,loss_rgb_d,loss_d_rgb,lr\n");
    for l in logs {
        out.push_str(&format!("{},{},{},{},{},{}\n", l.step, l.loss_mcl, l.loss_rgbd, l.loss_rgb_d, l.loss_d_rgb, l.lr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Batched views `([N,3,H,W], [N,1,H,W])` for both sides of the pairs.
pub struct PairBatch {
    pub rgb1: Tensor<f32>,
    pub depth1: Tensor<f32>,
    pub rgb2: Tensor<f32>,
    pub depth2: Tensor<f32>,
}

/// Draws `n` positive pairs according to `mode`.
pub fn sample_batch(
    sampler: &mut PairSampler<'_>,
    mode: PairingMode,
    spec: &TransformSpec,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let identity = Transform::identity(spec.output_size);
    let mut v1: Vec<View> = Vec::with_capacity(n);
    let mut v2: Vec<View> = Vec::with_capacity(n);
    for _ in 0..n {
        let pair = match mode {
            PairingMode::AugmentOnly => sampler.next_single(),
            PairingMode::TemporalOnly | PairingMode::Combined => sampler.next_pair(),
        };
        let (a, b) = match mode {
            PairingMode::TemporalOnly => (
                apply(&identity, &pair.view1.rgb, &pair.view1.depth)?,
                apply(&identity, &pair.view2.rgb, &pair.view2.depth)?,
            ),
            _ => {
                let p = make_views(&pair, spec, rng)?;
                (p.view1, p.view2)
            }
        };
        v1.push(a);
        v2.push(b);
    }
    let (rgb1, depth1) = stack_views(&v1);
    let (rgb2, depth2) = stack_views(&v2);
    Ok(PairBatch { rgb1, depth1, rgb2, depth2 })
}

/// Stateful pretraining run over one dataset.
pub struct Pretrainer<'a> {
    setup: PretrainSetup,
    loss: LossConfig,
    pair: EncoderPair<f32>,
    opt: Sgd<f32>,
    sampler: PairSampler<'a>,
    aug_rng: ChaCha8Rng,
    step: usize,
    total: usize,
    steps_per_epoch: usize,
    history: Vec<StepLog>,
}

impl<'a> Pretrainer<'a> {
    /// Random streams for weights, sampling and augmentation all derive
    /// from `setup.pretrain.seed`; `setup.sampler.seed` is not consulted.
    pub fn new(setup: &PretrainSetup, data: &'a SequenceDataset) -> Result<Self> {
        setup.validate()?;
        if data.num_frames() == 0 {
            return Err(Error::Dataset("pretraining dataset is empty".into()));
        }
        let p = &setup.pretrain;
        let q = init_weights::<f32>(&setup.network, derive_seed(p.seed, stream::INIT));
        let sampler_cfg = SamplerConfig {
            seed: derive_seed(p.seed, stream::SAMPLER),
            ..setup.sampler
        };
        let steps_per_epoch = data.num_frames().div_ceil(p.batch_size);
        Ok(Self {
            loss: setup.effective_loss(),
            pair: EncoderPair::new(q, p.m),
            opt: Sgd::new(p.momentum, p.weight_decay),
            sampler: PairSampler::new(data, sampler_cfg),
            aug_rng: ChaCha8Rng::seed_from_u64(derive_seed(p.seed, stream::AUGMENT)),
            step: 0,
            total: p.steps.unwrap_or(p.epochs * steps_per_epoch),
            steps_per_epoch,
            history: Vec::new(),
            setup: setup.clone(),
        })
    }

    pub fn encoders(&self) -> &EncoderPair<f32> {
        &self.pair
    }

    pub fn history(&self) -> &[StepLog] {
        &self.history
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let p = &self.setup.pretrain;
        if p.cosine {
            cosine_lr(p.lr, step, self.total)
        } else {
            p.lr
        }
    }

    /// One optimization step followed by the momentum update.
    pub fn step(&mut self) -> Result<StepLog> {
        let spec = &self.setup.augment;
        let b = sample_batch(&mut self.sampler, self.setup.pretrain.pairing, spec, self.setup.pretrain.batch_size, &mut self.aug_rng)?;
        let k1 = encode(&self.pair.k, &b.rgb1, &b.depth1)?;
        let k2 = encode(&self.pair.k, &b.rgb2, &b.depth2)?;

        let mut g = Graph::new();
        let bound = self.pair.q.bind(&mut g, true);
        let cfg = &self.setup.network;
        let (r, d) = (g.constant(b.rgb1), g.constant(b.depth1));
        let q1 = encode_graph(&mut g, &bound, cfg, r, d);
        let (r, d) = (g.constant(b.rgb2), g.constant(b.depth2));
        let q2 = encode_graph(&mut g, &bound, cfg, r, d);
        let (root, terms) = mcl_node(&mut g, q1, q2, &k1, &k2, &self.loss)?;
        if !terms.mcl.is_finite() {
            return Err(Error::NonFinite(format!("pretrain step {}: loss terms {terms:?}", self.step)));
        }
        let grads = g.backward(root);
        let lr = self.lr_at(self.step);
        for (_, part) in self.pair.q.partitions_mut() {
            let gp = part.gradients(&bound, &grads);
            self.opt.step(part, &gp, lr);
        }
        if !self.pair.q.is_finite() {
            return Err(Error::NonFinite(format!("pretrain step {}: query weights diverged", self.step)));
        }
        self.pair.momentum_update()?;
        let log = StepLog::new(self.step, terms, lr);
        self.history.push(log);
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining steps, calling `on_step` after each.
    pub fn run(mut self, mut on_step: impl FnMut(&StepLog)) -> Result<PretrainOutcome> {
        while !self.is_done() {
            let log = self.step()?;
            on_step(&log);
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> PretrainOutcome {
        PretrainOutcome {
            epoch: self.step / self.steps_per_epoch.max(1),
            step: self.step,
            seed: self.setup.pretrain.seed,
            encoders: self.pair,
            history: self.history,
            setup: self.setup,
        }
    }
}

pub struct PretrainOutcome {
    pub encoders: EncoderPair<f32>,
    pub history: Vec<StepLog>,
    pub setup: PretrainSetup,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

/// Number of trailing loss values kept in checkpoint metadata.
pub const LOSS_TAIL: usize = 20;

impl PretrainOutcome {
    /// Checkpoint of both encoders; `config` is the resolved run config to
    /// snapshot, or the setup itself when `None`.
    pub fn checkpoint(&self, config: Option<serde_json::Value>) -> Result<Checkpoint> {
        let config = match config {
            Some(c) => c,
            None => serde_json::to_value(&self.setup)?,
        };
        let mut meta = CheckpointMeta::new(CheckpointKind::Encoder, self.setup.network.clone(), config);
        meta.epoch = self.epoch;
        meta.step = self.step;
        meta.seed = self.seed;
        let from = self.history.len().saturating_sub(LOSS_TAIL);
        meta.loss_tail = self.history[from..].iter().map(|l| l.loss_mcl).collect();
        Ok(Checkpoint::from_encoders(&self.encoders, meta))
    }
}

pub fn pretrain(setup: &PretrainSetup, data: &SequenceDataset) -> Result<PretrainOutcome> {
    Pretrainer::new(setup, data)?.run(|_| {})
}

/// Mean of the first and last `window` values of `loss_mcl`.
pub fn loss_window_means(history: &[StepLog], window: usize) -> Option<(f64, f64)> {
    if history.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(history.len());
    let mean = |s: &[StepLog]| s.iter().map(|l| l.loss_mcl).sum::<f64>() / s.len() as f64;
    Some((mean(&history[..w]), mean(&history[history.len() - w..])))
}

/// Cosine statistics of query representations of view 1 against key
/// representations of view 2. Representations are unit-norm, so cosine is
/// the dot product.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Mean fused cosine over matching pairs.
    pub positive: f64,
    /// Mean fused cosine over non-matching pairs.
    pub negative: f64,
    /// Mean cosine between RGB queries and depth keys of matching pairs.
    pub crossmodal_positive: f64,
}

impl Alignment {
    pub fn margin(&self) -> f64 {
        self.positive - self.negative
    }
}

/// Measures [`Alignment`] on `n` pairs drawn from `data` with the setup's
/// pairing mode and transforms.
pub fn alignment(pair: &EncoderPair<f32>, setup: &PretrainSetup, data: &SequenceDataset, n: usize, seed: u64) -> Result<Alignment> {
    if n < 2 {
        return Err(Error::Config("alignment needs at least two pairs".into()));
    }
    let mut sampler = PairSampler::new(data, SamplerConfig { seed: derive_seed(seed, stream::SAMPLER), ..setup.sampler });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream::AUGMENT));
    let b = sample_batch(&mut sampler, setup.pretrain.pairing, &setup.augment, n, &mut rng)?;
    alignment_of(&pair.q, &pair.k, &b)
}

fn alignment_of(q: &EncoderWeights<f32>, k: &EncoderWeights<f32>, b: &PairBatch) -> Result<Alignment> {
    let qr = encode(q, &b.rgb1, &b.depth1)?;
    let kr = encode(k, &b.rgb2, &b.depth2)?;
    let n = qr.len();
    let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum::<f64>();
    let (mut pos, mut neg, mut cross) = (0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let c = dot(qr.rgbd.row(i), kr.rgbd.row(j));
            if i == j {
                pos += c;
                cross += dot(qr.rgb.row(i), kr.d.row(i));
            } else {
                neg += c;
            }
        }
    }
    Ok(Alignment {
        positive: pos / n as f64,
        negative: neg / (n * (n - 1)) as f64,
        crossmodal_positive: cross / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Split, SynthConfig};
    use crate::network::FuseLevel;

    fn tiny_setup() -> PretrainSetup {
        let network = BlockConfig {
            widths: [4, 4, 8, 8, 8],
            rep_dim: 8,
            input_size: [32, 32],
            fuse_at: FuseLevel::C3,
        };
        PretrainSetup {
            sampler: SamplerConfig { delta_t: 5, seed: 0 },
            augment: TransformSpec {
                output_size: [32, 32],
                ..TransformSpec::default()
            },
            network,
            loss: LossConfig::default(),
            pretrain: PretrainConfig {
                steps: Some(3),
                batch_size: 4,
                seed: 11,
                ..PretrainConfig::default()
            },
        }
    }

    fn tiny_data() -> SequenceDataset {
        let cfg = SynthConfig {
            num_sequences: 2,
            frames_per_sequence: 12,
            width: 32,
            height: 32,
            seed: 1,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, Split::Train).unwrap().dataset
    }

    #[test]
    fn pairing_mode_parses() {
        for m in PairingMode::ALL {
            assert_eq!(m.to_string().parse::<PairingMode>().unwrap(), m);
        }
        assert!("both".parse::<PairingMode>().is_err());
    }

    #[test]
    fn zero_lr_keeps_query_and_key_fixed() {
        let data = tiny_data();
        let mut setup = tiny_setup();
        setup.pretrain.lr = 0.0;
        let init = init_weights::<f32>(&setup.network, derive_seed(setup.pretrain.seed, stream::INIT));
        let out = pretrain(&setup, &data).unwrap();
        assert_eq!(out.encoders.q, init);
        assert_eq!(out.encoders.k, init);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn same_seed_same_bytes() {
        let data = tiny_data();
        let a = pretrain(&tiny_setup(), &data).unwrap().checkpoint(None).unwrap().to_bytes().unwrap();
        let b = pretrain(&tiny_setup(), &data).unwrap().checkpoint(None).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let mut other = tiny_setup();
        other.pretrain.seed = 12;
        let c = pretrain(&other, &data).unwrap().checkpoint(None).unwrap().to_bytes().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn crossmodal_off_zeroes_weights_but_logs_terms() {
        let data = tiny_data();
        let mut setup = tiny_setup();
        setup.pretrain.crossmodal = false;
        let out = pretrain(&setup, &data).unwrap();
        for l in &out.history {
            assert_eq!(l.loss_mcl, l.loss_rgbd);
            assert!(l.loss_rgb_d > 0.0);
        }
    }

    #[test]
    fn temporal_only_batches_are_resized_frames() {
        let data = tiny_data();
        let setup = tiny_setup();
        let mut sampler = PairSampler::new(&data, SamplerConfig { delta_t: 0, seed: 2 });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&mut sampler, PairingMode::TemporalOnly, &setup.augment, 3, &mut rng).unwrap();
        assert_eq!(b.rgb1.shape(), &[3, 3, 32, 32]);
        assert_eq!(b.depth1.shape(), &[3, 1, 32, 32]);
        // Δt = 0 makes both sides the same frame, untouched at native size
        assert_eq!(b.rgb1, b.rgb2);
        assert_eq!(b.depth1, b.depth2);
    }

    #[test]
    fn validation_rejects_bad_setups() {
        let mut s = tiny_setup();
        s.augment.output_size = [64, 64];
        assert!(s.validate().is_err());
        let mut s = tiny_setup();
        s.pretrain.batch_size = 1;
        assert!(s.validate().is_err());
        let mut s = tiny_setup();
        s.pretrain.m = 1.5;
        assert!(s.validate().is_err());
    }

    #[test]
    fn alignment_of_identical_encoders_on_identical_views() {
        let data = tiny_data();
        let mut setup = tiny_setup();
        setup.sampler.delta_t = 0;
        setup.pretrain.pairing = PairingMode::TemporalOnly;
        let pair = EncoderPair::new(init_weights::<f32>(&setup.network, 5), 0.99);
        let a = alignment(&pair, &setup, &data, 4, 0).unwrap();
        assert!((a.positive - 1.0).abs() < 1e-5, "{a:?}");
        assert!(a.negative <= 1.0 + 1e-6);
    }
}
