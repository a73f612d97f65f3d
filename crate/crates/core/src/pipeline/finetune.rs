use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use super::optim::{clip_grad_norm, Sgd};
use super::{derive_seed, stack_pairs, stream};
use crate::data::{AnnotatedFrame, Annotations, BBox};
use crate::detector::{build_detector, detect, detection_loss_node, detector_graph, DetLossTerms, DetectorConfig, DetectorWeights, TransferReport};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalResult, Interpolation, Predictions};
use crate::graph::Graph;
use crate::network::{BlockConfig, EncoderWeights};
use crate::tensor::Tensor;

/// Where the detector backbone starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Copied from a pretrained query encoder.
    #[default]
    Timclr,
    Random,
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitMode::Timclr => "timclr",
            InitMode::Random => "random",
        })
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "timclr" => Ok(InitMode::Timclr),
            "random" => Ok(InitMode::Random),
            _ => Err(Error::Config(format!("unknown init mode `{s}` (timclr, random)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub max_grad_norm: f64,
    pub init_mode: InitMode,
    pub seed: u64,
    /// Evaluation period in steps; 0 evaluates once per epoch.
    pub eval_every: usize,
    /// Confidence threshold used when scoring the held-out slice.
    pub eval_conf_threshold: f64,
    /// AP50 level whose first crossing is reported.
    pub target_ap50: Option<f64>,
    /// End the run at the first evaluation reaching `target_ap50`.
    pub stop_at_target: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 26,
            steps: None,
            batch_size: 4,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            max_grad_norm: 10.0,
            init_mode: InitMode::Timclr,
            seed: 0,
            eval_every: 0,
            eval_conf_threshold: 0.01,
            target_ap50: None,
            stop_at_target: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("finetune: batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.momentum >= 0.0 && self.weight_decay >= 0.0 && self.max_grad_norm >= 0.0) {
            return Err(Error::Config("finetune: lr, momentum, weight_decay and max_grad_norm must be non-negative".into()));
        }
        if !(self.eval_conf_threshold > 0.0 && self.eval_conf_threshold < 1.0) {
            return Err(Error::Config("finetune: eval_conf_threshold must lie in (0,1)".into()));
        }
        if self.stop_at_target && self.target_ap50.is_none() {
            return Err(Error::Config("finetune: stop_at_target needs target_ap50".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub step: usize,
    pub loss: f64,
    pub loss_box: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Held-out scores after `step` optimization steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub ap50: f64,
    pub ap: f64,
}

/// Network-ready copies of annotated frames.
struct Prepared {
    rgb: Vec<Tensor<f32>>,
    depth: Vec<Tensor<f32>>,
    boxes: Vec<Vec<BBox>>,
}

fn prepare(frames: &[AnnotatedFrame], block: &BlockConfig) -> Result<Prepared> {
    let mut p = Prepared {
        rgb: Vec::with_capacity(frames.len()),
        depth: Vec::with_capacity(frames.len()),
        boxes: Vec::with_capacity(frames.len()),
    };
    for f in frames {
        let [h, w] = block.input_size;
        if f.frame.height() != h || f.frame.width() != w {
            return Err(Error::Dataset(format!(
                "frame {}:{} is {}x{}, detector expects {w}x{h}",
                f.frame.seq_id,
                f.frame.frame_idx,
                f.frame.width(),
                f.frame.height()
            )));
        }
        let (r, d) = f.frame.to_tensors();
        p.rgb.push(r);
        p.depth.push(d);
        p.boxes.push(f.boxes.clone());
    }
    Ok(p)
}

/// Detections for every frame, in batches of `batch`.
pub fn predict(w: &DetectorWeights<f32>, frames: &[AnnotatedFrame], batch: usize) -> Result<Predictions> {
    let p = prepare(frames, &w.block)?;
    let mut preds = Predictions::new();
    for (chunk, idx) in frames.chunks(batch.max(1)).zip((0..frames.len()).step_by(batch.max(1))) {
        let (rgb, depth) = stack_pairs((idx..idx + chunk.len()).map(|i| (&p.rgb[i], &p.depth[i])));
        for (f, dets) in chunk.iter().zip(detect(w, &rgb, &depth)?) {
            preds.insert((f.frame.seq_id.clone(), f.frame.frame_idx), dets);
        }
    }
    Ok(preds)
}

pub fn annotations_of(frames: &[AnnotatedFrame]) -> Annotations {
    frames.iter().map(|f| ((f.frame.seq_id.clone(), f.frame.frame_idx), f.boxes.clone())).collect()
}

/// AP of `w` on `frames`, decoding at `conf_threshold` instead of the
/// deployment threshold so the precision-recall curve is not truncated.
pub fn evaluate_detector(w: &DetectorWeights<f32>, frames: &[AnnotatedFrame], conf_threshold: f64) -> Result<EvalResult> {
    let mut probe = w.clone();
    probe.cfg.conf_threshold = conf_threshold;
    evaluate(&predict(&probe, frames, 8)?, &annotations_of(frames), Interpolation::Point101)
}

pub struct Finetuner {
    cfg: FinetuneConfig,
    weights: DetectorWeights<f32>,
    transfer: TransferReport,
    opt: Sgd<f32>,
    train: Prepared,
    order: Vec<usize>,
    cursor: usize,
    shuffle: ChaCha8Rng,
    step: usize,
    total: usize,
    steps_per_epoch: usize,
    history: Vec<FinetuneLog>,
    evals: Vec<EvalPoint>,
    steps_to_target: Option<usize>,
}

impl Finetuner {
    /// `encoder` is required for [`InitMode::Timclr`] and ignored otherwise.
    pub fn new(
        train: &[AnnotatedFrame],
        encoder: Option<&EncoderWeights<f32>>,
        block: &BlockConfig,
        det: &DetectorConfig,
        cfg: &FinetuneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        det.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset("finetuning set is empty".into()));
        }
        let enc = match cfg.init_mode {
            InitMode::Timclr => Some(encoder.ok_or_else(|| Error::Config("finetune: init_mode timclr needs an encoder checkpoint".into()))?),
            InitMode::Random => None,
        };
        let (weights, transfer) = build_detector(enc, block, det, derive_seed(cfg.seed, stream::HEAD_INIT))?;
        if let Some(bad) = train.iter().flat_map(|f| &f.boxes).find(|b| b.class_id >= det.num_classes) {
            return Err(Error::Dataset(format!("class id {} but detector has {} classes", bad.class_id, det.num_classes)));
        }
        let train = prepare(train, block)?;
        let steps_per_epoch = train.rgb.len().div_ceil(cfg.batch_size);
        let mut me = Self {
            weights,
            transfer,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            order: (0..train.rgb.len()).collect(),
            cursor: 0,
            shuffle: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::SHUFFLE)),
            train,
            step: 0,
            total: cfg.steps.unwrap_or(cfg.epochs * steps_per_epoch),
            steps_per_epoch,
            history: Vec::new(),
            evals: Vec::new(),
            steps_to_target: None,
            cfg: cfg.clone(),
        };
        me.order.shuffle(&mut me.shuffle);
        Ok(me)
    }

    pub fn weights(&self) -> &DetectorWeights<f32> {
        &self.weights
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let n = self.order.len();
        let take = self.cfg.batch_size.min(n - self.cursor);
        let batch = self.order[self.cursor..self.cursor + take].to_vec();
        self.cursor += take;
        if self.cursor == n {
            self.cursor = 0;
            self.order.shuffle(&mut self.shuffle);
        }
        batch
    }

    pub fn step(&mut self) -> Result<FinetuneLog> {
        let idx = self.next_batch();
        let (rgb, depth) = stack_pairs(idx.iter().map(|&i| (&self.train.rgb[i], &self.train.depth[i])));
        let targets: Vec<Vec<BBox>> = idx.iter().map(|&i| self.train.boxes[i].clone()).collect();

        let mut g = Graph::new();
        let bound = self.weights.bind(&mut g, true);
        let (r, d) = (g.constant(rgb), g.constant(depth));
        let heads = detector_graph(&mut g, &bound, &self.weights, r, d);
        let (root, terms): (_, DetLossTerms) = detection_loss_node(&mut g, heads, &targets, &self.weights.cfg, self.weights.block.input_size)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("finetune step {}: loss terms {terms:?}", self.step)));
        }
        let grads = g.backward(root);
        let mut gs: Vec<_> = self.weights.partitions().iter().map(|(_, p)| p.gradients(&bound, &grads)).collect();
        let grad_norm = clip_grad_norm(&mut gs, self.cfg.max_grad_norm);
        for ((_, part), gp) in self.weights.partitions_mut().into_iter().zip(&gs) {
            self.opt.step(part, gp, self.cfg.lr);
        }
        if !self.weights.is_finite() {
            return Err(Error::NonFinite(format!("finetune step {}: weights diverged", self.step)));
        }
        let log = FinetuneLog {
            step: self.step,
            loss: terms.total,
            loss_box: terms.boxes,
            loss_obj: terms.obj,
            loss_cls: terms.cls,
            grad_norm,
            lr: self.cfg.lr,
        };
        self.history.push(log);
        self.step += 1;
        Ok(log)
    }

    fn eval_due(&self) -> bool {
        let period = if self.cfg.eval_every == 0 { self.steps_per_epoch } else { self.cfg.eval_every };
        self.step % period == 0 || self.is_done()
    }

    /// Scores the current weights on `held_out` and records the point.
    pub fn evaluate(&mut self, held_out: &[AnnotatedFrame]) -> Result<EvalPoint> {
        let r = evaluate_detector(&self.weights, held_out, self.cfg.eval_conf_threshold)?;
        let point = EvalPoint {
            step: self.step,
            ap50: r.ap50,
            ap: r.ap_50_95,
        };
        self.evals.push(point);
        if let Some(t) = self.cfg.target_ap50 {
            if self.steps_to_target.is_none() && point.ap50 >= t {
                self.steps_to_target = Some(self.step);
            }
        }
        Ok(point)
    }

    /// Trains to completion, scoring `held_out` on schedule when given.
    pub fn run(mut self, held_out: Option<&[AnnotatedFrame]>, mut on_step: impl FnMut(&FinetuneLog, Option<&EvalPoint>)) -> Result<FinetuneOutcome> {
        while !self.is_done() {
            let log = self.step()?;
            let mut point = None;
            if let Some(h) = held_out {
                if self.eval_due() {
                    point = Some(self.evaluate(h)?);
                }
            }
            on_step(&log, point.as_ref());
            if self.cfg.stop_at_target && self.steps_to_target.is_some() {
                break;
            }
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> FinetuneOutcome {
        FinetuneOutcome {
            epoch: self.step / self.steps_per_epoch,
            step: self.step,
            weights: self.weights,
            transfer: self.transfer,
            history: self.history,
            evals: self.evals,
            steps_to_target: self.steps_to_target,
            cfg: self.cfg,
        }
    }
}

pub struct FinetuneOutcome {
    pub weights: DetectorWeights<f32>,
    pub transfer: TransferReport,
    pub history: Vec<FinetuneLog>,
    pub evals: Vec<EvalPoint>,
    /// First evaluated step whose AP50 reached the target.
    pub steps_to_target: Option<usize>,
    pub cfg: FinetuneConfig,
    pub epoch: usize,
    pub step: usize,
}

impl FinetuneOutcome {
    pub fn checkpoint(&self, config: serde_json::Value) -> Checkpoint {
        let mut meta = CheckpointMeta::new(CheckpointKind::Detector, self.weights.block.clone(), config);
        meta.epoch = self.epoch;
        meta.step = self.step;
        meta.seed = self.cfg.seed;
        let from = self.history.len().saturating_sub(super::pretrain::LOSS_TAIL);
        meta.loss_tail = self.history[from..].iter().map(|l| l.loss).collect();
        Checkpoint::from_detector(&self.weights, meta)
    }
}

pub fn finetune(
    train: &[AnnotatedFrame],
    held_out: Option<&[AnnotatedFrame]>,
    encoder: Option<&EncoderWeights<f32>>,
    block: &BlockConfig,
    det: &DetectorConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    Finetuner::new(train, encoder, block, det, cfg)?.run(held_out, |_, _| {})
}

pub fn write_finetune_log(path: &std::path::Path, logs: &[FinetuneLog]) -> Result<()> {
    let mut out = String::from("step,loss,loss_box,loss_obj,loss_cls,grad_norm,lr\n");
    for l in logs {
        out.push_str(&format!("{},{},{},{},{},{},{}\n", l.step, l.loss, l.loss_box, l.loss_obj, l.loss_cls, l.grad_norm, l.lr));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
