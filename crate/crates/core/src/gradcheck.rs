//! End-to-end gradient checks of the two training objectives on toy
//! networks in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::detector::{build_detector, detection_loss, detection_loss_node, detector_graph, forward, DetectorConfig, DetectorWeights, RawPrediction};
use crate::error::Result;
use crate::graph::Graph;
use crate::loss::{grad_check, loss_mcl, mcl_node, GradCheckConfig, GradCheckReport, LossConfig, RepBatch};
use crate::network::{encode, encode_graph, init_weights, BlockConfig, EncoderWeights, FuseLevel, Reps};
use crate::tensor::Tensor;

/// Toy encoder: batch 4 at 32×32.
pub fn toy_encoder_block() -> BlockConfig {
    BlockConfig {
        widths: [4, 6, 8, 8, 12],
        rep_dim: 8,
        input_size: [32, 32],
        fuse_at: FuseLevel::C3,
    }
}

/// Toy detector: 16×16 input, so `C4` is 1×1 and SPP uses a unit kernel.
pub fn toy_detector_setup() -> (BlockConfig, DetectorConfig) {
    let block = BlockConfig {
        widths: [4, 6, 8, 8, 8],
        rep_dim: 4,
        input_size: [16, 16],
        fuse_at: FuseLevel::C3,
    };
    let cfg = DetectorConfig {
        anchors: vec![vec![[4.0, 6.0], [6.0, 10.0]], vec![[8.0, 12.0], [12.0, 14.0]]],
        num_classes: 2,
        spp_pools: vec![1],
        ..DetectorConfig::default()
    };
    (block, cfg)
}

fn random_batch(n: usize, [h, w]: [usize; 2], rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let rgb = (0..n * 3 * h * w).map(|_| rng.gen::<f64>()).collect();
    let d = (0..n * h * w).map(|_| rng.gen::<f64>()).collect();
    (Tensor::from_vec(&[n, 3, h, w], rgb), Tensor::from_vec(&[n, 1, h, w], d))
}

/// Checks the gradient of the full contrastive objective with respect to
/// every query-encoder parameter.
pub fn check_mcl(gc: &GradCheckConfig, loss: &LossConfig) -> Result<GradCheckReport> {
    let block = toy_encoder_block();
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let q = init_weights::<f64>(&block, gc.seed);
    let k = init_weights::<f64>(&block, gc.seed + 1);
    let (r1, d1) = random_batch(4, block.input_size, &mut rng);
    let (r2, d2) = random_batch(4, block.input_size, &mut rng);
    let k1 = encode(&k, &r1, &d1)?;
    let k2 = encode(&k, &r2, &d2)?;

    let mut g = Graph::new();
    let bound = q.bind(&mut g, true);
    let (a, b) = (g.constant(r1.clone()), g.constant(d1.clone()));
    let q1 = encode_graph(&mut g, &bound, &block, a, b);
    let (a, b) = (g.constant(r2.clone()), g.constant(d2.clone()));
    let q2 = encode_graph(&mut g, &bound, &block, a, b);
    let (root, _) = mcl_node(&mut g, q1, q2, &k1, &k2, loss)?;
    let grads = g.backward(root);
    let analytic: Vec<f64> = q.partitions().iter().flat_map(|(_, p)| p.gradients(&bound, &grads).flatten()).collect();

    let mut probe: EncoderWeights<f64> = q.clone();
    let value = |flat: &[f64]| {
        probe.assign_flat(flat);
        let reps = |r: &Tensor<f64>, d: &Tensor<f64>| encode(&probe, r, d).expect("toy encode");
        let batch = RepBatch {
            q1: reps(&r1, &d1),
            q2: reps(&r2, &d2),
            k1: k1.clone(),
            k2: k2.clone(),
        };
        loss_mcl(&batch, loss).unwrap_or(f64::NAN)
    };
    grad_check(value, &q.flatten(), &analytic, gc)
}

/// Two toy frames with targets of both classes.
fn toy_targets() -> Vec<Vec<BBox>> {
    vec![
        vec![BBox::new(1.5, 2.0, 6.5, 9.0, 0), BBox::new(8.0, 3.0, 15.0, 15.5, 1)],
        vec![BBox::new(4.2, 5.1, 9.7, 14.3, 1)],
    ]
}

/// Checks the gradient of the detection loss with respect to every
/// detector parameter.
pub fn check_detection(gc: &GradCheckConfig) -> Result<GradCheckReport> {
    let (block, cfg) = toy_detector_setup();
    let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
    let (mut det, _) = build_detector::<f64>(None, &block, &cfg, gc.seed)?;
    // larger head weights so box and class terms depend visibly on the backbone
    for (_, t) in det.head.iter_mut() {
        if t.shape().len() == 4 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.3..0.3));
        }
    }
    let (rgb, depth) = random_batch(2, block.input_size, &mut rng);
    let targets = toy_targets();

    let mut g = Graph::new();
    let bound = det.bind(&mut g, true);
    let (a, b) = (g.constant(rgb.clone()), g.constant(depth.clone()));
    let heads = detector_graph(&mut g, &bound, &det, a, b);
    let (root, _) = detection_loss_node(&mut g, heads, &targets, &det.cfg, block.input_size)?;
    let grads = g.backward(root);
    let analytic: Vec<f64> = det.partitions().iter().flat_map(|(_, p)| p.gradients(&bound, &grads).flatten()).collect();

    let mut probe: DetectorWeights<f64> = det.clone();
    let value = |flat: &[f64]| {
        probe.assign_flat(flat);
        let raw: RawPrediction<f64> = forward(&probe, &rgb, &depth).expect("toy forward");
        detection_loss(&raw, &targets, &probe.cfg, block.input_size).map_or(f64::NAN, |o| o.terms.total)
    };
    grad_check(value, &det.flatten(), &analytic, gc)
}

/// Both checks under one configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckSummary {
    pub mcl: GradCheckReport,
    pub detection: GradCheckReport,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.mcl.passed() && self.detection.passed()
    }
}

pub fn run_all(gc: &GradCheckConfig, loss: &LossConfig) -> Result<GradCheckSummary> {
    Ok(GradCheckSummary {
        mcl: check_mcl(gc, loss)?,
        detection: check_detection(gc)?,
    })
}

/// Unit-norm rows, used to fabricate representation batches.
pub fn random_reps(n: usize, d: usize, rng: &mut impl Rng) -> Reps<f64> {
    let mut unit = || {
        let mut data: Vec<f64> = (0..n * d).map(|_| rng.gen::<f64>() - 0.5).collect();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Tensor::from_vec(&[n, d], data)
    };
    Reps {
        rgbd: unit(),
        rgb: unit(),
        d: unit(),
    }
}
