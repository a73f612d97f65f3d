//! Two-scale RGB-D detector on top of the C3-fused backbone.
//!
//! Backbone: RGB and depth stages `C1..C3`, the fusion 1×1 conv and fused
//! `C4`, laid out and named exactly like the encoder so weights transfer by
//! name. Neck: SPP on `C4`, a 1×1 projection (top-down map `t4`), nearest
//! ×2 upsampling, concatenation with the fused `C3` map and a 3×3 conv giving
//! `p3`; a stride-2 3×3 conv on `p3`, concatenation with `t4` and a 3×3 conv
//! giving `p4`. Neck convs use leaky ReLU (slope 0.1). Each scale ends in a
//! 1×1 conv predicting `A·(5 + C)` channels, anchor-major, ordered
//! `tx, ty, tw, th, objectness, classes…`.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BBox;
use crate::error::{Error, Result};
use crate::eval::box_iou;
use crate::graph::{Graph, Var};
use crate::network::{
    backbone_graph, backbone_specs, check_inputs, conv, fusion_specs, materialize, push_conv, BlockConfig, Bound, EncoderWeights,
    FuseLevel, Init, ParamSet, ParamSpec,
};
use crate::tensor::{Real, Tensor};

const LEAK: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub num_classes: usize,
    /// `(w, h)` anchor shapes in pixels, one list per stride.
    pub anchors: Vec<Vec<[f64; 2]>>,
    pub strides: Vec<usize>,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    /// Odd max-pool kernels of the SPP block.
    pub spp_pools: Vec<usize>,
    /// Initial bias of every objectness logit.
    pub obj_bias: f64,
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Unassigned predictions overlapping a target above this IoU get no
    /// objectness loss.
    pub ignore_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 1,
            anchors: vec![
                vec![[10.0, 20.0], [16.0, 32.0], [24.0, 48.0]],
                vec![[32.0, 64.0], [48.0, 96.0], [64.0, 128.0]],
            ],
            strides: vec![8, 16],
            conf_threshold: 0.25,
            nms_iou: 0.5,
            spp_pools: vec![3, 5, 7],
            obj_bias: -4.0,
            box_weight: 1.0,
            obj_weight: 1.0,
            cls_weight: 1.0,
            ignore_iou: 0.5,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("detector: num_classes must be at least 1".into()));
        }
        if self.strides != [8, 16] {
            return Err(Error::Config(format!("detector: strides must be [8, 16], got {:?}", self.strides)));
        }
        if self.anchors.len() != 2 || self.anchors.iter().any(|a| a.is_empty() || a.len() != self.anchors[0].len()) {
            return Err(Error::Config("detector: need the same non-zero anchor count at both scales".into()));
        }
        if self.anchors.iter().flatten().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("detector: anchors must be positive".into()));
        }
        for (what, v) in [("conf_threshold", self.conf_threshold), ("nms_iou", self.nms_iou), ("ignore_iou", self.ignore_iou)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("detector: {what} must lie in (0,1], got {v}")));
            }
        }
        if self.spp_pools.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("detector: SPP kernels must be odd".into()));
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors[0].len()
    }

    /// Channels per anchor.
    pub fn slot(&self) -> usize {
        5 + self.num_classes
    }
}

/// Backbone block config as the detector uses it: fusion at C3.
fn detector_block(block: &BlockConfig) -> BlockConfig {
    BlockConfig {
        fuse_at: FuseLevel::C3,
        ..block.clone()
    }
}

fn neck_specs(block: &BlockConfig, cfg: &DetectorConfig) -> Vec<ParamSpec> {
    let (w3, w4) = (block.width(3), block.width(4));
    let mut s = Vec::new();
    push_conv(&mut s, "neck.spp_proj", w4 * (1 + cfg.spp_pools.len()), w4, 1, Init::Kaiming);
    push_conv(&mut s, "neck.td", w4 + w3, w3, 3, Init::Kaiming);
    push_conv(&mut s, "neck.down", w3, w3, 3, Init::Kaiming);
    push_conv(&mut s, "neck.bu", w3 + w4, w4, 3, Init::Kaiming);
    s
}

fn head_specs(block: &BlockConfig, cfg: &DetectorConfig) -> Vec<ParamSpec> {
    let out = cfg.num_anchors() * cfg.slot();
    let mut s = Vec::new();
    for (name, cin) in [("head.p3", block.width(3)), ("head.p4", block.width(4))] {
        push_conv(&mut s, name, cin, out, 1, Init::Std(0.01));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorWeights<T: Real = f32> {
    pub block: BlockConfig,
    pub cfg: DetectorConfig,
    /// `rgb.*`, `depth.*` (C1–C3), `fused.fuse` and `fused.c4`.
    pub backbone: ParamSet<T>,
    pub neck: ParamSet<T>,
    pub head: ParamSet<T>,
}

/// Which backbone arrays came from the encoder.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied: Vec<String>,
    pub fresh: Vec<String>,
}

/// Fresh weights from `seed`, with backbone arrays copied from `enc` where
/// name and shape agree. `block.fuse_at` is ignored (the detector always
/// fuses at C3); widths must match the encoder's.
pub fn build_detector<T: Real>(
    enc: Option<&EncoderWeights<T>>,
    block: &BlockConfig,
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(DetectorWeights<T>, TransferReport)> {
    cfg.validate()?;
    block.validate()?;
    let block = detector_block(block);
    let [h, w] = block.input_size;
    if h % 16 != 0 || w % 16 != 0 {
        return Err(Error::Config(format!("detector input {h}x{w} must be a multiple of 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut backbone_spec = backbone_specs("rgb", 3, &block, 3);
    backbone_spec.extend(backbone_specs("depth", 1, &block, 3));
    backbone_spec.extend(fusion_specs(&block, 4));
    let mut backbone: ParamSet<T> = materialize(&backbone_spec, &mut rng);
    let neck = materialize(&neck_specs(&block, cfg), &mut rng);
    let mut head: ParamSet<T> = materialize(&head_specs(&block, cfg), &mut rng);
    let slot = cfg.slot();
    for name in ["head.p3.b", "head.p4.b"] {
        let b = head.get_mut(name).expect("head bias");
        for a in 0..cfg.num_anchors() {
            b.data_mut()[a * slot + 4] = T::lit(cfg.obj_bias);
        }
    }
    let mut report = TransferReport::default();
    if let Some(enc) = enc {
        if enc.cfg.widths != block.widths {
            return Err(Error::Shape {
                name: "block widths".into(),
                expected: block.widths.to_vec(),
                found: enc.cfg.widths.to_vec(),
            });
        }
        let source: std::collections::HashMap<&str, &Tensor<T>> = enc.iter().collect();
        for (name, t) in backbone.iter_mut() {
            match source.get(name) {
                Some(src) if src.shape() == t.shape() => {
                    *t = (*src).clone();
                    report.copied.push(name.to_string());
                }
                _ => report.fresh.push(name.to_string()),
            }
        }
    } else {
        report.fresh = backbone.iter().map(|(n, _)| n.to_string()).collect();
    }
    Ok((
        DetectorWeights {
            block,
            cfg: cfg.clone(),
            backbone,
            neck,
            head,
        },
        report,
    ))
}

impl<T: Real> DetectorWeights<T> {
    pub fn partitions(&self) -> [(&'static str, &ParamSet<T>); 3] {
        [("backbone", &self.backbone), ("neck", &self.neck), ("head", &self.head)]
    }

    pub fn partitions_mut(&mut self) -> [(&'static str, &mut ParamSet<T>); 3] {
        [("backbone", &mut self.backbone), ("neck", &mut self.neck), ("head", &mut self.head)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.backbone.iter().chain(self.neck.iter()).chain(self.head.iter())
    }

    pub fn numel(&self) -> usize {
        self.partitions().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.partitions().iter().all(|(_, p)| p.is_finite())
    }

    pub fn cast<U: Real>(&self) -> DetectorWeights<U> {
        DetectorWeights {
            block: self.block.clone(),
            cfg: self.cfg.clone(),
            backbone: self.backbone.cast(),
            neck: self.neck.cast(),
            head: self.head.cast(),
        }
    }

    pub fn flatten(&self) -> Vec<T> {
        self.partitions().iter().flat_map(|(_, p)| p.flatten()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[T]) {
        let mut at = 0;
        for (_, p) in self.partitions_mut() {
            let n = p.numel();
            p.assign_flat(&flat[at..at + n]);
            at += n;
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut out = Bound::new();
        for (_, p) in self.partitions() {
            p.bind(g, trainable, &mut out);
        }
        out
    }
}

/// Largest SPP kernel usable on an `h×w` map: every window must still
/// overlap the map from every position.
fn check_spp(pools: &[usize], h: usize, w: usize) -> Result<()> {
    let limit = 2 * h.min(w) - 1;
    match pools.iter().find(|&&k| k > limit || k % 2 == 0) {
        Some(k) => Err(Error::Config(format!("SPP kernel {k} does not fit a {h}x{w} map"))),
        None => Ok(()),
    }
}

pub fn spp_graph<T: Real>(g: &mut Graph<T>, x: Var, pools: &[usize]) -> Var {
    if pools.is_empty() {
        return x;
    }
    let mut parts = vec![x];
    for &k in pools {
        parts.push(g.max_pool_same(x, k));
    }
    g.concat_channels(&parts)
}

/// Identity plus stride-1 same-padded max pools, concatenated on channels.
pub fn spp<T: Real>(feature: &Tensor<T>, pools: &[usize]) -> Result<Tensor<T>> {
    let (_, _, h, w) = feature.dims4();
    check_spp(pools, h, w)?;
    let mut g = Graph::new();
    let x = g.constant(feature.clone());
    let y = spp_graph(&mut g, x, pools);
    Ok(g.value(y).clone())
}

/// `(p3, p4)` graph nodes.
pub fn pan_graph<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &DetectorConfig, c3: Var, c4: Var) -> (Var, Var) {
    let s = spp_graph(g, c4, &cfg.spp_pools);
    let t4 = conv(g, b, "neck.spp_proj", s, 1, 0);
    let t4 = g.leaky_relu(t4, LEAK);
    let up = g.upsample2(t4);
    let cat = g.concat_channels(&[up, c3]);
    let p3 = conv(g, b, "neck.td", cat, 1, 1);
    let p3 = g.leaky_relu(p3, LEAK);
    let down = conv(g, b, "neck.down", p3, 2, 1);
    let down = g.leaky_relu(down, LEAK);
    let cat = g.concat_channels(&[down, t4]);
    let p4 = conv(g, b, "neck.bu", cat, 1, 1);
    let p4 = g.leaky_relu(p4, LEAK);
    (p3, p4)
}

/// Top-down/bottom-up aggregation of the fused C3 and C4 maps.
pub fn pan_aggregate<T: Real>(c3_fused: &Tensor<T>, c4: &Tensor<T>, neck: &ParamSet<T>, cfg: &DetectorConfig) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n3, _, h3, w3) = c3_fused.dims4();
    let (n4, _, h4, w4) = c4.dims4();
    if n3 != n4 || h3 != 2 * h4 || w3 != 2 * w4 {
        return Err(Error::Shape {
            name: "c4".into(),
            expected: vec![n3, 0, h3 / 2, w3 / 2],
            found: c4.shape().to_vec(),
        });
    }
    check_spp(&cfg.spp_pools, h4, w4)?;
    let mut g = Graph::new();
    let mut b = Bound::new();
    neck.bind(&mut g, false, &mut b);
    let c3 = g.constant(c3_fused.clone());
    let c4 = g.constant(c4.clone());
    let (p3, p4) = pan_graph(&mut g, &b, cfg, c3, c4);
    Ok((g.value(p3).clone(), g.value(p4).clone()))
}

/// Head output nodes for strides 8 and 16.
pub fn detector_graph<T: Real>(g: &mut Graph<T>, b: &Bound, w: &DetectorWeights<T>, rgb: Var, depth: Var) -> [Var; 2] {
    let bb = backbone_graph(g, b, &w.block, rgb, depth, 4);
    let c3 = bb.fused[3].expect("fused C3");
    let c4 = bb.fused[4].expect("fused C4");
    let (p3, p4) = pan_graph(g, b, &w.cfg, c3, c4);
    [conv(g, b, "head.p3", p3, 1, 0), conv(g, b, "head.p4", p4, 1, 0)]
}

/// Raw head outputs, `[N, A·(5+C), Hs, Ws]` per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction<T: Real = f32> {
    pub scales: Vec<Tensor<T>>,
}

pub fn forward<T: Real>(w: &DetectorWeights<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<RawPrediction<T>> {
    check_inputs(&w.block, rgb, depth)?;
    let (_, _, h, ww) = rgb.dims4();
    check_spp(&w.cfg.spp_pools, h / 16, ww / 16)?;
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let r = g.constant(rgb.clone());
    let d = g.constant(depth.clone());
    let heads = detector_graph(&mut g, &b, w, r, d);
    Ok(RawPrediction {
        scales: heads.iter().map(|&v| g.value(v).clone()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

impl Detection {
    pub fn class_id(&self) -> usize {
        self.bbox.class_id
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Decodes one image (`sample` of the batch) into detections scoring above
/// the confidence threshold, clipped to the image.
pub fn decode<T: Real>(raw: &RawPrediction<T>, sample: usize, cfg: &DetectorConfig, image: [usize; 2]) -> Result<Vec<Detection>> {
    let [ih, iw] = image;
    let slot = cfg.slot();
    let mut out = Vec::new();
    for (s, t) in raw.scales.iter().enumerate() {
        let (_, c, gh, gw) = t.dims4();
        if c != cfg.num_anchors() * slot {
            return Err(Error::Shape {
                name: format!("head {s}"),
                expected: vec![cfg.num_anchors() * slot],
                found: vec![c],
            });
        }
        let stride = cfg.strides[s] as f64;
        let data = &t.data()[sample * c * gh * gw..(sample + 1) * c * gh * gw];
        let at = |ch: usize, i: usize, j: usize| data[(ch * gh + i) * gw + j].as_f64();
        for (a, anchor) in cfg.anchors[s].iter().enumerate() {
            for i in 0..gh {
                for j in 0..gw {
                    let base = a * slot;
                    let v: Vec<f64> = (0..slot).map(|k| at(base + k, i, j)).collect();
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(Error::NonFinite(format!("head {s} anchor {a} cell ({i},{j})")));
                    }
                    let obj = sigmoid(v[4]);
                    let cx = (j as f64 + sigmoid(v[0])) * stride;
                    let cy = (i as f64 + sigmoid(v[1])) * stride;
                    let bw = anchor[0] * v[2].exp();
                    let bh = anchor[1] * v[3].exp();
                    for cls in 0..cfg.num_classes {
                        let score = obj * sigmoid(v[5 + cls]);
                        if score > cfg.conf_threshold {
                            let bbox = BBox::from_center(cx, cy, bw, bh, cls).clip(iw as f64, ih as f64);
                            if bbox.is_valid() {
                                out.push(Detection { bbox, score });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Grid cell and `(tx, ty, tw, th)` that decode to `bbox` under `anchor`.
/// `None` when the centre lies exactly on a cell edge (σ⁻¹ would be ±∞).
pub fn inverse_decode(bbox: &BBox, anchor: [f64; 2], stride: usize) -> Option<((usize, usize), [f64; 4])> {
    let (cx, cy) = bbox.center();
    let s = stride as f64;
    let (fx, fy) = (cx / s, cy / s);
    let (j, i) = (fx.floor(), fy.floor());
    let (ox, oy) = (fx - j, fy - i);
    if ox <= 0.0 || oy <= 0.0 || i < 0.0 || j < 0.0 {
        return None;
    }
    Some((
        (i as usize, j as usize),
        [logit(ox), logit(oy), (bbox.width() / anchor[0]).ln(), (bbox.height() / anchor[1]).ln()],
    ))
}

/// Greedy per-class suppression in descending score order (ties keep input
/// order). A detection is dropped when its IoU with an already kept
/// detection of the same class exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id() != d.class_id() || box_iou(&k.bbox, &d.bbox) <= iou_threshold)
        {
            kept.push(d);
        }
    }
    kept
}

/// Forward pass, decode and NMS for every image of the batch.
pub fn detect<T: Real>(w: &DetectorWeights<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Vec<Vec<Detection>>> {
    let raw = forward(w, rgb, depth)?;
    let (n, _, h, ww) = rgb.dims4();
    (0..n)
        .map(|i| Ok(nms(&decode(&raw, i, &w.cfg, [h, ww])?, w.cfg.nms_iou)))
        .collect()
}

/// Forward-mode value with derivatives along `(tx, ty, tw, th)`.
#[derive(Clone, Copy, Debug)]
struct Dual4 {
    v: f64,
    d: [f64; 4],
}

impl Dual4 {
    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; 4];
        d[k] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: self.d.map(|x| x * dv),
        }
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.map(e, e)
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid(self.v);
        self.map(s, s * (1.0 - s))
    }

    fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    fn max(self, o: Self) -> Self {
        if self.v >= o.v {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self.v <= o.v {
            self
        } else {
            o
        }
    }
}

impl Add for Dual4 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: std::array::from_fn(|k| self.d[k] + o.d[k]),
        }
    }
}

impl Sub for Dual4 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Neg for Dual4 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: self.d.map(|x| -x),
        }
    }
}

impl Mul for Dual4 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            v: self.v * o.v,
            d: std::array::from_fn(|k| self.d[k] * o.v + self.v * o.d[k]),
        }
    }
}

impl Div for Dual4 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        Self {
            v: self.v * inv,
            d: std::array::from_fn(|k| (self.d[k] - self.v * inv * o.d[k]) * inv),
        }
    }
}

/// `1 − IoU + ρ²/c² + α·v` with `α` differentiated too.
fn ciou_loss(p: [Dual4; 4], gt: &BBox) -> Dual4 {
    let [cx, cy, w, h] = p;
    let half = Dual4::cst(0.5);
    let (px1, px2) = (cx - w * half, cx + w * half);
    let (py1, py2) = (cy - h * half, cy + h * half);
    let c = Dual4::cst;
    let (gx1, gy1, gx2, gy2) = (c(gt.x_min), c(gt.y_min), c(gt.x_max), c(gt.y_max));
    let zero = c(0.0);
    let iw = (px2.min(gx2) - px1.max(gx1)).max(zero);
    let ih = (py2.min(gy2) - py1.max(gy1)).max(zero);
    let inter = iw * ih;
    let union = w * h + c(gt.area()) - inter;
    let iou = inter / union;
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let diag = cw * cw + ch * ch + c(1e-9);
    let (gcx, gcy) = gt.center();
    let dx = cx - c(gcx);
    let dy = cy - c(gcy);
    let rho = dx * dx + dy * dy;
    let k = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let da = c((gt.width() / gt.height()).atan()) - (w / h).atan();
    let v = c(k) * da * da;
    let alpha = v / (c(1.0) - iou + v + c(1e-9));
    c(1.0) - iou + rho / diag + alpha * v
}

/// Binary cross-entropy on a logit and its derivative.
#[inline]
fn bce(x: f64, y: f64) -> (f64, f64) {
    (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p(), sigmoid(x) - y)
}

/// Components of the detection loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetLossTerms {
    pub boxes: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct DetLossOutput<T: Real = f32> {
    pub terms: DetLossTerms,
    /// Gradient of `terms.total` per scale, shaped like the raw outputs.
    pub grads: Vec<Tensor<T>>,
}

/// Anchor index (across scales, scale-major) whose shape best overlaps `(w, h)`.
fn best_anchor(cfg: &DetectorConfig, w: f64, h: f64) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_iou = -1.0;
    for (s, anchors) in cfg.anchors.iter().enumerate() {
        for (a, an) in anchors.iter().enumerate() {
            let inter = w.min(an[0]) * h.min(an[1]);
            let iou = inter / (w * h + an[0] * an[1] - inter);
            if iou > best_iou {
                best_iou = iou;
                best = (s, a);
            }
        }
    }
    best
}

fn canonical(a: &BBox, b: &BBox) -> Ordering {
    [a.x_min, a.y_min, a.x_max, a.y_max]
        .iter()
        .zip([b.x_min, b.y_min, b.x_max, b.y_max].iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
        .then(a.class_id.cmp(&b.class_id))
}

/// Sum over prediction slots of box (CIoU), objectness and class losses,
/// averaged over the images of the batch. `targets[n]` belongs to image `n`.
pub fn detection_loss<T: Real>(raw: &RawPrediction<T>, targets: &[Vec<BBox>], cfg: &DetectorConfig, image: [usize; 2]) -> Result<DetLossOutput<T>> {
    let [ih, iw] = image;
    let slot = cfg.slot();
    let n = raw.scales.first().map(|t| t.shape()[0]).unwrap_or(0);
    if targets.len() != n {
        return Err(Error::Shape {
            name: "targets".into(),
            expected: vec![n],
            found: vec![targets.len()],
        });
    }
    for bx in targets.iter().flatten() {
        let inside = bx.x_min >= 0.0 && bx.y_min >= 0.0 && bx.x_max <= iw as f64 && bx.y_max <= ih as f64;
        if !bx.is_valid() || !inside || bx.class_id >= cfg.num_classes {
            return Err(Error::Config(format!("target {bx:?} invalid for a {iw}x{ih} image")));
        }
    }
    let data: Vec<Vec<f64>> = raw.scales.iter().map(|t| t.data().iter().map(|v| v.as_f64()).collect()).collect();
    let mut grads: Vec<Vec<f64>> = data.iter().map(|d| vec![0.0; d.len()]).collect();
    let mut terms = DetLossTerms::default();
    let inv_n = 1.0 / n.max(1) as f64;
    for (img, tgts) in targets.iter().enumerate() {
        let mut sorted = tgts.clone();
        sorted.sort_by(canonical);
        // (scale, anchor, i, j) → target
        let mut assigned: std::collections::BTreeMap<(usize, usize, usize, usize), BBox> = Default::default();
        for t in &sorted {
            let (s, a) = best_anchor(cfg, t.width(), t.height());
            let (_, _, gh, gw) = raw.scales[s].dims4();
            let stride = cfg.strides[s] as f64;
            let (cx, cy) = t.center();
            let j = ((cx / stride).floor() as usize).min(gw - 1);
            let i = ((cy / stride).floor() as usize).min(gh - 1);
            assigned.entry((s, a, i, j)).or_insert(*t);
        }
        for (s, t) in raw.scales.iter().enumerate() {
            let (_, c, gh, gw) = t.dims4();
            let stride = cfg.strides[s] as f64;
            let base_img = img * c * gh * gw;
            let idx = |ch: usize, i: usize, j: usize| base_img + (ch * gh + i) * gw + j;
            for (a, anchor) in cfg.anchors[s].iter().enumerate() {
                for i in 0..gh {
                    for j in 0..gw {
                        let ch0 = a * slot;
                        let raw_t: [f64; 4] = std::array::from_fn(|k| data[s][idx(ch0 + k, i, j)]);
                        let obj_logit = data[s][idx(ch0 + 4, i, j)];
                        if raw_t.iter().any(|v| !v.is_finite()) || !obj_logit.is_finite() {
                            return Err(Error::NonFinite(format!("head {s} anchor {a} cell ({i},{j})")));
                        }
                        let p = [
                            (Dual4::cst(j as f64) + Dual4::var(raw_t[0], 0).sigmoid()) * Dual4::cst(stride),
                            (Dual4::cst(i as f64) + Dual4::var(raw_t[1], 1).sigmoid()) * Dual4::cst(stride),
                            Dual4::cst(anchor[0]) * Dual4::var(raw_t[2], 2).exp(),
                            Dual4::cst(anchor[1]) * Dual4::var(raw_t[3], 3).exp(),
                        ];
                        if let Some(gt) = assigned.get(&(s, a, i, j)) {
                            let l = ciou_loss(p, gt);
                            terms.boxes += l.v * inv_n;
                            for k in 0..4 {
                                grads[s][idx(ch0 + k, i, j)] += cfg.box_weight * l.d[k] * inv_n;
                            }
                            let (lo, go) = bce(obj_logit, 1.0);
                            terms.obj += lo * inv_n;
                            grads[s][idx(ch0 + 4, i, j)] += cfg.obj_weight * go * inv_n;
                            for cls in 0..cfg.num_classes {
                                let y = if cls == gt.class_id { 1.0 } else { 0.0 };
                                let (lc, gc) = bce(data[s][idx(ch0 + 5 + cls, i, j)], y);
                                terms.cls += lc * inv_n;
                                grads[s][idx(ch0 + 5 + cls, i, j)] += cfg.cls_weight * gc * inv_n;
                            }
                        } else {
                            let pred = BBox::from_center(p[0].v, p[1].v, p[2].v, p[3].v, 0);
                            let ignored = sorted.iter().any(|g| box_iou(&pred, g) > cfg.ignore_iou);
                            if !ignored {
                                let (lo, go) = bce(obj_logit, 0.0);
                                terms.obj += lo * inv_n;
                                grads[s][idx(ch0 + 4, i, j)] += cfg.obj_weight * go * inv_n;
                            }
                        }
                    }
                }
            }
        }
    }
    terms.total = cfg.box_weight * terms.boxes + cfg.obj_weight * terms.obj + cfg.cls_weight * terms.cls;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite("detection loss".into()));
    }
    let grads = raw
        .scales
        .iter()
        .zip(grads)
        .map(|(t, g)| Tensor::from_vec(t.shape(), g.into_iter().map(T::lit).collect()))
        .collect();
    Ok(DetLossOutput { terms, grads })
}

/// Appends the detection loss to `g` as a scalar over the head nodes.
pub fn detection_loss_node<T: Real>(g: &mut Graph<T>, heads: [Var; 2], targets: &[Vec<BBox>], cfg: &DetectorConfig, image: [usize; 2]) -> Result<(Var, DetLossTerms)> {
    let raw = RawPrediction {
        scales: heads.iter().map(|&h| g.value(h).clone()).collect(),
    };
    let out = detection_loss(&raw, targets, cfg, image)?;
    let inputs = heads.iter().copied().zip(out.grads).collect();
    Ok((g.custom_scalar(T::lit(out.terms.total), inputs), out.terms))
}

/// One serialized detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionJson {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
    pub class_id: usize,
}

/// Detections of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub seq_id: String,
    pub frame_idx: usize,
    pub detections: Vec<DetectionJson>,
}

impl DetectionRecord {
    pub fn new(seq_id: impl Into<String>, frame_idx: usize, dets: &[Detection]) -> Self {
        Self {
            seq_id: seq_id.into(),
            frame_idx,
            detections: dets
                .iter()
                .map(|d| DetectionJson {
                    bbox: [d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max],
                    score: d.score,
                    class_id: d.class_id(),
                })
                .collect(),
        }
    }

    pub fn detections(&self) -> Vec<Detection> {
        self.detections
            .iter()
            .map(|d| Detection {
                bbox: BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.class_id),
                score: d.score,
            })
            .collect()
    }
}

pub fn write_detections(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_weights;
    use rand::Rng;

    fn toy_block() -> BlockConfig {
        BlockConfig {
            widths: [4, 6, 8, 10, 12],
            rep_dim: 4,
            input_size: [32, 32],
            fuse_at: FuseLevel::C3,
        }
    }

    fn toy_cfg() -> DetectorConfig {
        DetectorConfig {
            spp_pools: vec![1, 3],
            ..DetectorConfig::default()
        }
    }

    #[test]
    fn transfer_copies_every_backbone_array_from_c3_encoder() {
        let enc = init_weights::<f32>(&toy_block(), 1);
        let (det, report) = build_detector(Some(&enc), &toy_block(), &toy_cfg(), 2).unwrap();
        assert!(report.fresh.is_empty(), "{:?}", report.fresh);
        for (name, t) in det.backbone.iter() {
            let src = enc.iter().find(|(n, _)| *n == name).unwrap().1;
            assert_eq!(t, src);
        }
        let (again, _) = build_detector(Some(&enc), &toy_block(), &toy_cfg(), 2).unwrap();
        assert_eq!(det, again);
    }

    #[test]
    fn transfer_from_c5_encoder_keeps_unimodal_c3() {
        let block = BlockConfig {
            fuse_at: FuseLevel::C5,
            ..toy_block()
        };
        let enc = init_weights::<f32>(&block, 1);
        let (_, report) = build_detector(Some(&enc), &block, &toy_cfg(), 2).unwrap();
        assert!(report.copied.iter().any(|n| n == "rgb.c3.conv1.w"));
        assert!(report.fresh.iter().any(|n| n == "fused.fuse.w"));
        assert!(report.fresh.iter().any(|n| n.starts_with("fused.c4")));
    }

    #[test]
    fn width_mismatch_is_a_shape_error() {
        let enc = init_weights::<f32>(&toy_block(), 1);
        let other = BlockConfig {
            widths: [4, 6, 8, 10, 14],
            ..toy_block()
        };
        assert!(matches!(build_detector(Some(&enc), &other, &toy_cfg(), 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn spp_constant_map_and_bright_pixel() {
        let t = Tensor::<f64>::full(&[1, 2, 5, 5], 0.7);
        let y = spp(&t, &[3, 5]).unwrap();
        assert_eq!(y.shape(), &[1, 6, 5, 5]);
        assert!(y.data().iter().all(|&v| v == 0.7));
        assert_eq!(spp(&t, &[]).unwrap(), t);
        let mut x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        x.data_mut()[2 * 5 + 1] = 1.0;
        let y = spp(&x, &[3]).unwrap();
        let pooled = &y.data()[25..];
        for i in 0..5 {
            for j in 0..5 {
                let expect = if (1..=3).contains(&i) && j <= 2 { 1.0 } else { 0.0 };
                assert_eq!(pooled[i * 5 + j], expect, "({i},{j})");
            }
        }
        assert!(spp(&x, &[11]).is_err());
    }

    #[test]
    fn pan_shapes_and_zero_weights() {
        let block = BlockConfig {
            input_size: [64, 64],
            ..toy_block()
        };
        let (mut det, _) = build_detector::<f64>(None, &block, &DetectorConfig::default(), 0).unwrap();
        let c3 = Tensor::full(&[1, 8, 8, 8], 0.3);
        let c4 = Tensor::full(&[1, 10, 4, 4], -0.2);
        let (p3, p4) = pan_aggregate(&c3, &c4, &det.neck, &det.cfg).unwrap();
        assert_eq!(p3.shape(), &[1, 8, 8, 8]);
        assert_eq!(p4.shape(), &[1, 10, 4, 4]);
        for (_, t) in det.neck.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (p3, p4) = pan_aggregate(&c3, &c4, &det.neck, &det.cfg).unwrap();
        assert!(p3.data().iter().chain(p4.data()).all(|&v| v == 0.0));
    }

    fn raw_single(cfg: &DetectorConfig, grids: [(usize, usize); 2], fill: f64) -> RawPrediction<f64> {
        let c = cfg.num_anchors() * cfg.slot();
        RawPrediction {
            scales: grids.iter().map(|&(h, w)| Tensor::full(&[1, c, h, w], fill)).collect(),
        }
    }

    #[test]
    fn zero_logits_decode_by_hand() {
        let cfg = DetectorConfig {
            anchors: vec![vec![[16.0, 16.0]], vec![[32.0, 32.0]]],
            conf_threshold: 0.2,
            ..DetectorConfig::default()
        };
        let raw = raw_single(&cfg, [(8, 8), (4, 4)], 0.0);
        let dets = decode(&raw, 0, &cfg, [64, 64]).unwrap();
        // score 0.25 at every slot; pick the stride-8 cell (row 3, col 2)
        let d = dets
            .iter()
            .find(|d| (d.bbox.center().0 - 20.0).abs() < 1e-12 && (d.bbox.center().1 - 28.0).abs() < 1e-12)
            .unwrap();
        assert!((d.bbox.width() - 16.0).abs() < 1e-12 && (d.bbox.height() - 16.0).abs() < 1e-12);
        assert!((d.score - 0.25).abs() < 1e-12);
        let strict = DetectorConfig {
            conf_threshold: 1.0,
            ..cfg.clone()
        };
        assert!(decode(&raw, 0, &strict, [64, 64]).unwrap().is_empty());
    }

    #[test]
    fn inverse_decode_round_trip() {
        let cfg = DetectorConfig {
            conf_threshold: 0.01,
            ..DetectorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let w = rng.gen_range(4.0..40.0);
            let h = rng.gen_range(4.0..40.0);
            let cx = rng.gen_range(w / 2.0 + 0.01..64.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0 + 0.01..64.0 - h / 2.0);
            let bbox = BBox::from_center(cx, cy, w, h, 0);
            let s = rng.gen_range(0..2);
            let a = rng.gen_range(0..3);
            let ((i, j), t) = inverse_decode(&bbox, cfg.anchors[s][a], cfg.strides[s]).unwrap();
            let mut raw = raw_single(&cfg, [(8, 8), (4, 4)], -30.0);
            let (_, _, gh, gw) = raw.scales[s].dims4();
            let slot = cfg.slot();
            for (k, v) in t.iter().chain([30.0, 30.0].iter()).enumerate() {
                raw.scales[s].data_mut()[((a * slot + k) * gh + i) * gw + j] = *v;
            }
            let dets = decode(&raw, 0, &cfg, [64, 64]).unwrap();
            assert_eq!(dets.len(), 1);
            let b = dets[0].bbox;
            let err = [b.x_min - bbox.x_min, b.y_min - bbox.y_min, b.x_max - bbox.x_max, b.y_max - bbox.y_max]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-6, "{err}");
        }
    }

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x0, y0, x1, y1, 0),
            score,
        }
    }

    #[test]
    fn nms_traces() {
        let a = det(0.0, 0.0, 10.0, 10.0, 0.9);
        assert_eq!(nms(&[a], 0.5), vec![a]);
        let b = det(0.0, 0.0, 10.0, 10.0, 0.8);
        assert_eq!(nms(&[b, a], 0.5), vec![a]);
        // IoU(A, B) = 0.6: widths 10 and 10, overlap 7.5 → 75 / 125
        let b = det(2.5, 0.0, 12.5, 10.0, 0.8);
        assert!((box_iou(&a.bbox, &b.bbox) - 0.6).abs() < 1e-12);
        let c = det(50.0, 50.0, 60.0, 60.0, 0.7);
        assert_eq!(nms(&[c, b, a], 0.5), vec![a, c]);
        let mut other = b;
        other.bbox.class_id = 1;
        assert_eq!(nms(&[a, other], 0.5).len(), 2);
    }

    #[test]
    fn zero_targets_give_positive_objectness_only_loss() {
        let cfg = toy_cfg();
        let raw = raw_single(&cfg, [(4, 4), (2, 2)], 0.3);
        let out = detection_loss(&raw, &[vec![]], &cfg, [32, 32]).unwrap();
        assert!(out.terms.total > 0.0 && out.terms.boxes == 0.0 && out.terms.cls == 0.0);
    }

    #[test]
    fn perfect_saturated_prediction_has_vanishing_loss() {
        let cfg = DetectorConfig {
            anchors: vec![vec![[10.0, 20.0]], vec![[32.0, 64.0]]],
            ignore_iou: 1.0,
            ..DetectorConfig::default()
        };
        let gt = BBox::from_center(13.0, 21.0, 12.0, 18.0, 0);
        let ((i, j), t) = inverse_decode(&gt, [10.0, 20.0], 8).unwrap();
        let mut raw = raw_single(&cfg, [(4, 4), (2, 2)], -40.0);
        let slot = cfg.slot();
        for (k, v) in t.iter().chain([40.0, 40.0].iter()).enumerate() {
            raw.scales[0].data_mut()[(k * 4 + i) * 4 + j] = *v;
        }
        let out = detection_loss(&raw, &[vec![gt]], &cfg, [32, 32]).unwrap();
        assert!(out.terms.total < 1e-9, "{:?}", out.terms);
        assert_eq!(slot, 6);
    }

    #[test]
    fn loss_ignores_target_order_and_rejects_outside_targets() {
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg.num_anchors() * cfg.slot();
        let raw = RawPrediction {
            scales: vec![
                Tensor::from_vec(&[1, c, 4, 4], (0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                Tensor::from_vec(&[1, c, 2, 2], (0..c * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            ],
        };
        let t = vec![BBox::new(1.0, 2.0, 9.0, 20.0, 0), BBox::new(14.0, 3.0, 30.0, 31.0, 0), BBox::new(2.0, 2.0, 12.0, 22.0, 0)];
        let a = detection_loss(&raw, &[t.clone()], &cfg, [32, 32]).unwrap();
        let rev: Vec<_> = t.iter().rev().copied().collect();
        let b = detection_loss(&raw, &[rev], &cfg, [32, 32]).unwrap();
        assert_eq!(a.terms, b.terms);
        assert_eq!(a.grads, b.grads);
        assert!(detection_loss(&raw, &[vec![BBox::new(20.0, 0.0, 40.0, 10.0, 0)]], &cfg, [32, 32]).is_err());
    }

    #[test]
    fn ciou_dual_matches_finite_differences() {
        let gt = BBox::new(3.0, 4.0, 17.0, 25.0, 0);
        let t = [0.3, -0.7, 0.2, -0.1];
        let eval = |t: [f64; 4]| {
            let p = [
                (Dual4::cst(1.0) + Dual4::var(t[0], 0).sigmoid()) * Dual4::cst(8.0),
                (Dual4::cst(1.0) + Dual4::var(t[1], 1).sigmoid()) * Dual4::cst(8.0),
                Dual4::cst(10.0) * Dual4::var(t[2], 2).exp(),
                Dual4::cst(20.0) * Dual4::var(t[3], 3).exp(),
            ];
            ciou_loss(p, &gt)
        };
        let l = eval(t);
        for k in 0..4 {
            let mut tp = t;
            let mut tm = t;
            tp[k] += 1e-6;
            tm[k] -= 1e-6;
            let num = (eval(tp).v - eval(tm).v) / 2e-6;
            assert!((num - l.d[k]).abs() < 1e-7 * num.abs().max(1.0), "{k}: {num} vs {}", l.d[k]);
        }
    }

    #[test]
    fn detection_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.json");
        let recs = vec![DetectionRecord::new("seq_0000", 3, &[det(1.0, 2.0, 3.0, 4.0, 0.5)])];
        write_detections(&path, &recs).unwrap();
        assert_eq!(read_detections(&path).unwrap(), recs);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"box\""));
    }

    #[test]
    fn untrained_detector_is_deterministic_and_quiet() {
        let (det, _) = build_detector::<f32>(None, &toy_block(), &toy_cfg(), 5).unwrap();
        let rgb = Tensor::full(&[1, 3, 32, 32], 0.5);
        let d = Tensor::full(&[1, 1, 32, 32], 0.3);
        let a = detect(&det, &rgb, &d).unwrap();
        assert_eq!(a, detect(&det, &rgb, &d).unwrap());
        let strict = DetectorWeights {
            cfg: DetectorConfig {
                conf_threshold: 0.99,
                ..det.cfg.clone()
            },
            ..det
        };
        assert!(detect(&strict, &rgb, &d).unwrap()[0].len() <= 3 * (16 + 4));
    }
}
