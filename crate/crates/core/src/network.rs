//! RGB and depth backbones, the fusion path, projection heads and the
//! momentum encoder.
//!
//! Stage `C1` is a stride-2 3×3 convolution with ReLU; stages `C2..C5` are
//! one residual block each (3×3/2 → ReLU → 3×3/1, 1×1/2 shortcut, ReLU after
//! the sum). Every stage halves the resolution, so `Ck` has stride `2^k`.
//! Each modality runs its own stages up to the fusion level; the two maps are
//! concatenated, mixed by a 1×1 convolution with ReLU, and the remaining
//! stages run on the fused map.
//!
//! Every backbone convolution is bias-free and followed by group
//! normalization, so a backbone forward pass is a per-sample function. The
//! projection heads (`fc1 → batch norm → ReLU → fc2 → L2`) normalize their
//! hidden layer over the batch with the batch's own statistics; there are no
//! running averages, and a head output depends on the other rows of its
//! batch.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Real, Tensor};

/// Guard used by every L2 normalisation of a representation.
pub const NORM_EPS: f64 = 1e-12;
/// Variance guard of every group normalization.
pub const GN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FuseLevel {
    #[serde(alias = "c3")]
    C3,
    #[serde(alias = "c4")]
    C4,
    #[serde(alias = "c5")]
    C5,
}

impl FuseLevel {
    pub const ALL: [FuseLevel; 3] = [FuseLevel::C3, FuseLevel::C4, FuseLevel::C5];

    pub fn stage(self) -> usize {
        match self {
            FuseLevel::C3 => 3,
            FuseLevel::C4 => 4,
            FuseLevel::C5 => 5,
        }
    }
}

impl fmt::Display for FuseLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "C{}", self.stage())
    }
}

impl FromStr for FuseLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c3" => Ok(FuseLevel::C3),
            "c4" => Ok(FuseLevel::C4),
            "c5" => Ok(FuseLevel::C5),
            other => Err(Error::Config(format!("unknown fusion level `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    /// Output channels of `C1..C5`.
    pub widths: [usize; 5],
    /// Representation dimension `d`.
    pub rep_dim: usize,
    /// `[height, width]` of encoder inputs.
    pub input_size: [usize; 2],
    pub fuse_at: FuseLevel,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 64, 128],
            rep_dim: 64,
            input_size: [64, 64],
            fuse_at: FuseLevel::C3,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) || self.rep_dim == 0 || self.input_size.contains(&0) {
            return Err(Error::Config("network: widths, rep_dim and input size must be positive".into()));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.widths[stage - 1]
    }

    /// Spatial size after stage `k` (3×3/2 convs with padding 1 round up).
    pub fn spatial(&self, stage: usize) -> [usize; 2] {
        let mut s = self.input_size;
        for _ in 0..stage {
            s = [s[0].div_ceil(2), s[1].div_ceil(2)];
        }
        s
    }
}

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// All scalars concatenated in name order.
    pub fn flatten(&self) -> Vec<T> {
        self.map.values().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length");
        let mut at = 0;
        for t in self.map.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// Same names with the same shapes.
    pub fn check_structure(&self, other: &ParamSet<T>) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::Config(format!(
                "parameter sets differ in size ({} vs {})",
                self.map.len(),
                other.map.len()
            )));
        }
        for (name, t) in &self.map {
            let Some(o) = other.map.get(name) else {
                return Err(Error::Config(format!("parameter `{name}` missing")));
            };
            if t.shape() != o.shape() {
                return Err(Error::Shape {
                    name: name.clone(),
                    expected: t.shape().to_vec(),
                    found: o.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Gradients of every array, zero where the graph produced none.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients<T>) -> ParamSet<T> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(name, t)| {
                    let g = bound.get(name).and_then(|v| grads.get(*v)).cloned();
                    (name.clone(), g.unwrap_or_else(|| Tensor::zeros(t.shape())))
                })
                .collect(),
        }
    }

    /// Adds every array to `g`, trainable or detached, keyed by name.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, out: &mut Bound) {
        for (name, t) in &self.map {
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            out.insert(name.clone(), v);
        }
    }
}

/// Parameter name → graph variable.
pub type Bound = HashMap<String, Var>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming,
    /// Normal with std `sqrt(1 / fan_in)`.
    Lecun,
    /// Normal with a fixed std.
    Std(f64),
    Const(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

pub(crate) fn push_conv(specs: &mut Vec<ParamSpec>, base: &str, cin: usize, cout: usize, k: usize, init: Init) {
    specs.push(ParamSpec {
        name: format!("{base}.w"),
        shape: vec![cout, cin, k, k],
        init,
    });
    specs.push(ParamSpec {
        name: format!("{base}.b"),
        shape: vec![cout],
        init: Init::Const(0.0),
    });
}

/// Bias-free conv followed by group normalization with its own affine
/// (`{base}.gn.g`, `{base}.gn.b`).
pub(crate) fn push_conv_gn(specs: &mut Vec<ParamSpec>, base: &str, cin: usize, cout: usize, k: usize, init: Init) {
    specs.push(ParamSpec {
        name: format!("{base}.w"),
        shape: vec![cout, cin, k, k],
        init,
    });
    push_affine(specs, &format!("{base}.gn"), cout);
}

/// Group count for `c` channels over `plane` pixels: the largest divisor of
/// `c` not above 8 whose groups hold at least 32 values, else 1. Tiny groups
/// on small late-stage maps would normalize to a near-constant sign pattern.
pub fn gn_groups(c: usize, plane: usize) -> usize {
    (1..=8).rev().find(|&g| c % g == 0 && c / g * plane >= 32).unwrap_or(1)
}

fn push_affine(specs: &mut Vec<ParamSpec>, base: &str, c: usize) {
    specs.push(ParamSpec {
        name: format!("{base}.g"),
        shape: vec![c],
        init: Init::Const(1.0),
    });
    specs.push(ParamSpec {
        name: format!("{base}.b"),
        shape: vec![c],
        init: Init::Const(0.0),
    });
}

fn push_linear(specs: &mut Vec<ParamSpec>, base: &str, cin: usize, cout: usize, init: Init) {
    specs.push(ParamSpec {
        name: format!("{base}.w"),
        shape: vec![cout, cin],
        init,
    });
    specs.push(ParamSpec {
        name: format!("{base}.b"),
        shape: vec![cout],
        init: Init::Const(0.0),
    });
}

pub(crate) fn push_stage(specs: &mut Vec<ParamSpec>, prefix: &str, stage: usize, cin: usize, cout: usize) {
    if stage == 1 {
        push_conv_gn(specs, &format!("{prefix}.c1"), cin, cout, 3, Init::Kaiming);
    } else {
        push_conv_gn(specs, &format!("{prefix}.c{stage}.conv1"), cin, cout, 3, Init::Kaiming);
        push_conv_gn(specs, &format!("{prefix}.c{stage}.conv2"), cout, cout, 3, Init::Kaiming);
        push_conv_gn(specs, &format!("{prefix}.c{stage}.short"), cin, cout, 1, Init::Lecun);
    }
}

/// Unimodal stages `C1..=last` for one modality.
pub(crate) fn backbone_specs(prefix: &str, in_channels: usize, cfg: &BlockConfig, last: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut cin = in_channels;
    for stage in 1..=last {
        push_stage(&mut specs, prefix, stage, cin, cfg.width(stage));
        cin = cfg.width(stage);
    }
    specs
}

/// Fusion 1×1 conv at the fusion level plus the fused stages up to `last`.
pub(crate) fn fusion_specs(cfg: &BlockConfig, last: usize) -> Vec<ParamSpec> {
    let level = cfg.fuse_at.stage();
    let w = cfg.width(level);
    let mut specs = Vec::new();
    push_conv_gn(&mut specs, "fused.fuse", 2 * w, w, 1, Init::Kaiming);
    for stage in level + 1..=last {
        push_stage(&mut specs, "fused", stage, cfg.width(stage - 1), cfg.width(stage));
    }
    specs
}

fn mlp_specs(cfg: &BlockConfig) -> Vec<ParamSpec> {
    let d = cfg.rep_dim;
    let uni = cfg.width(cfg.fuse_at.stage());
    let mut specs = Vec::new();
    for (head, cin) in [("rgbd", cfg.width(5)), ("rgb", uni), ("d", uni)] {
        push_linear(&mut specs, &format!("mlp.{head}.fc1"), cin, 2 * d, Init::Lecun);
        push_affine(&mut specs, &format!("mlp.{head}.bn"), 2 * d);
        push_linear(&mut specs, &format!("mlp.{head}.fc2"), 2 * d, d, Init::Lecun);
    }
    specs
}

/// Draws every spec in order from one stream.
pub(crate) fn materialize<T: Real>(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> ParamSet<T> {
    let mut set = ParamSet::new();
    for s in specs {
        let n: usize = s.shape.iter().product();
        let fan_in: usize = s.shape[1..].iter().product::<usize>().max(1);
        let data: Vec<T> = match s.init {
            Init::Const(c) => vec![T::lit(c); n],
            Init::Kaiming | Init::Lecun => {
                let gain = if s.init == Init::Kaiming { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(rng))).collect()
            }
            Init::Std(std) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(rng))).collect()
            }
        };
        set.insert(s.name.clone(), Tensor::from_vec(&s.shape, data));
    }
    set
}

/// The four disjoint partitions of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights<T: Real = f32> {
    pub cfg: BlockConfig,
    /// RGB stages up to the fusion level.
    pub rgb: ParamSet<T>,
    /// Depth stages up to the fusion level.
    pub depth: ParamSet<T>,
    /// Fusion 1×1 conv and the fused stages through `C5`.
    pub fused: ParamSet<T>,
    /// Projection heads for the fused, RGB and depth representations.
    pub mlp: ParamSet<T>,
}

pub fn init_weights<T: Real>(cfg: &BlockConfig, seed: u64) -> EncoderWeights<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = cfg.fuse_at.stage();
    EncoderWeights {
        cfg: cfg.clone(),
        rgb: materialize(&backbone_specs("rgb", 3, cfg, level), &mut rng),
        depth: materialize(&backbone_specs("depth", 1, cfg, level), &mut rng),
        fused: materialize(&fusion_specs(cfg, 5), &mut rng),
        mlp: materialize(&mlp_specs(cfg), &mut rng),
    }
}

impl<T: Real> EncoderWeights<T> {
    pub fn partitions(&self) -> [(&'static str, &ParamSet<T>); 4] {
        [("rgb", &self.rgb), ("depth", &self.depth), ("fused", &self.fused), ("mlp", &self.mlp)]
    }

    pub fn partitions_mut(&mut self) -> [(&'static str, &mut ParamSet<T>); 4] {
        [
            ("rgb", &mut self.rgb),
            ("depth", &mut self.depth),
            ("fused", &mut self.fused),
            ("mlp", &mut self.mlp),
        ]
    }

    /// Every array across partitions; names are globally unique.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.rgb.iter().chain(self.depth.iter()).chain(self.fused.iter()).chain(self.mlp.iter())
    }

    pub fn numel(&self) -> usize {
        self.partitions().iter().map(|(_, p)| p.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> EncoderWeights<U> {
        EncoderWeights {
            cfg: self.cfg.clone(),
            rgb: self.rgb.cast(),
            depth: self.depth.cast(),
            fused: self.fused.cast(),
            mlp: self.mlp.cast(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.partitions().iter().all(|(_, p)| p.is_finite())
    }

    pub fn check_structure(&self, other: &EncoderWeights<T>) -> Result<()> {
        for ((_, a), (_, b)) in self.partitions().iter().zip(other.partitions().iter()) {
            a.check_structure(b)?;
        }
        Ok(())
    }

    /// Scalars of all partitions in partition order.
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

/// Query encoder, momentum encoder and the momentum coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T: Real = f32> {
    pub q: EncoderWeights<T>,
    pub k: EncoderWeights<T>,
    pub m: f64,
}

impl<T: Real> EncoderPair<T> {
    /// Momentum encoder starts as an exact copy of the query encoder.
    pub fn new(q: EncoderWeights<T>, m: f64) -> Self {
        Self { k: q.clone(), q, m }
    }

    /// `θk ← m·θk + (1 − m)·θq`, elementwise; `q` untouched.
    pub fn momentum_update(&mut self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.m) {
            return Err(Error::Config(format!("momentum {} outside [0,1]", self.m)));
        }
        self.q.check_structure(&self.k)?;
        let m = T::lit(self.m);
        let one_minus = T::lit(1.0 - self.m);
        for ((_, kp), (_, qp)) in self.k.partitions_mut().into_iter().zip(self.q.partitions()) {
            for (name, kt) in kp.iter_mut() {
                let qt = qp.get(name).expect("structure checked");
                // equal entries stay put so a converged pair is an exact fixed point
                for (kv, &qv) in kt.data_mut().iter_mut().zip(qt.data()) {
                    if *kv != qv {
                        *kv = m * *kv + one_minus * qv;
                    }
                }
            }
        }
        Ok(())
    }
}

fn var(b: &Bound, name: &str) -> Var {
    *b.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
}

pub(crate) fn conv(g: &mut Graph<impl Real>, b: &Bound, base: &str, x: Var, stride: usize, pad: usize) -> Var {
    g.conv2d(x, var(b, &format!("{base}.w")), Some(var(b, &format!("{base}.b"))), stride, pad)
}

/// Conv without bias, then group normalization.
pub(crate) fn conv_gn<T: Real>(g: &mut Graph<T>, b: &Bound, base: &str, x: Var, stride: usize, pad: usize) -> Var {
    let y = g.conv2d(x, var(b, &format!("{base}.w")), None, stride, pad);
    let (_, c, h, w) = g.value(y).dims4();
    g.group_norm(y, var(b, &format!("{base}.gn.g")), var(b, &format!("{base}.gn.b")), gn_groups(c, h * w), GN_EPS)
}

fn linear(g: &mut Graph<impl Real>, b: &Bound, base: &str, x: Var) -> Var {
    g.linear(x, var(b, &format!("{base}.w")), Some(var(b, &format!("{base}.b"))))
}

pub(crate) fn stage<T: Real>(g: &mut Graph<T>, b: &Bound, prefix: &str, stage: usize, x: Var) -> Var {
    if stage == 1 {
        let y = conv_gn(g, b, &format!("{prefix}.c1"), x, 2, 1);
        return g.relu(y);
    }
    let base = format!("{prefix}.c{stage}");
    let h = conv_gn(g, b, &format!("{base}.conv1"), x, 2, 1);
    let h = g.relu(h);
    let h = conv_gn(g, b, &format!("{base}.conv2"), h, 1, 1);
    let s = conv_gn(g, b, &format!("{base}.short"), x, 2, 0);
    let y = g.add(h, s);
    g.relu(y)
}

/// Graph nodes of the shared backbone.
#[derive(Clone, Copy, Debug)]
pub struct BackboneVars {
    /// RGB map at the fusion level.
    pub uni_rgb: Var,
    /// Depth map at the fusion level.
    pub uni_d: Var,
    /// `fused[k]` is the fused map after stage `k` (the 1×1 conv output at
    /// the fusion level); `None` below the fusion level or past `last`.
    pub fused: [Option<Var>; 6],
    /// `C3` outputs of the unimodal backbones, when fusing at or above `C3`.
    pub c3_rgb: Var,
    pub c3_d: Var,
}

/// Runs both backbones to the fusion level, fuses, and continues to `last`.
pub fn backbone_graph<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &BlockConfig, rgb: Var, depth: Var, last: usize) -> BackboneVars {
    let level = cfg.fuse_at.stage();
    let mut r = rgb;
    let mut d = depth;
    let mut c3 = (rgb, depth);
    for k in 1..=level {
        r = stage(g, b, "rgb", k, r);
        d = stage(g, b, "depth", k, d);
        if k == 3 {
            c3 = (r, d);
        }
    }
    let cat = g.concat_channels(&[r, d]);
    let f = conv_gn(g, b, "fused.fuse", cat, 1, 0);
    let mut x = g.relu(f);
    let mut fused = [None; 6];
    fused[level] = Some(x);
    for k in level + 1..=last {
        x = stage(g, b, "fused", k, x);
        fused[k] = Some(x);
    }
    BackboneVars {
        uni_rgb: r,
        uni_d: d,
        fused,
        c3_rgb: c3.0,
        c3_d: c3.1,
    }
}

/// Linear → ReLU → Linear → L2 normalisation.
fn head<T: Real>(g: &mut Graph<T>, b: &Bound, name: &str, x: Var) -> Var {
    let h = linear(g, b, &format!("mlp.{name}.fc1"), x);
    let h = g.batch_norm(h, var(b, &format!("mlp.{name}.bn.g")), var(b, &format!("mlp.{name}.bn.b")), GN_EPS);
    let h = g.relu(h);
    let h = linear(g, b, &format!("mlp.{name}.fc2"), h);
    g.l2_normalize(h, NORM_EPS)
}

/// Representation nodes, each `[N, d]` with unit rows.
#[derive(Clone, Copy, Debug)]
pub struct RepVars {
    pub rgbd: Var,
    pub rgb: Var,
    pub d: Var,
}

pub fn encode_graph<T: Real>(g: &mut Graph<T>, b: &Bound, cfg: &BlockConfig, rgb: Var, depth: Var) -> RepVars {
    let bb = backbone_graph(g, b, cfg, rgb, depth, 5);
    let c5 = bb.fused[5].expect("fused path reaches C5");
    let pooled = g.global_avg_pool(c5);
    let rgbd = head(g, b, "rgbd", pooled);
    let pr = g.global_avg_pool(bb.uni_rgb);
    let rgb = head(g, b, "rgb", pr);
    let pd = g.global_avg_pool(bb.uni_d);
    let d = head(g, b, "d", pd);
    RepVars { rgbd, rgb, d }
}

/// Batched representations, each `[N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reps<T: Real = f32> {
    pub rgbd: Tensor<T>,
    pub rgb: Tensor<T>,
    pub d: Tensor<T>,
}

/// The three representations of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RepTriple {
    pub r_rgbd: Vec<f64>,
    pub r_rgb: Vec<f64>,
    pub r_d: Vec<f64>,
}

impl<T: Real> Reps<T> {
    pub fn len(&self) -> usize {
        self.rgbd.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn triple(&self, i: usize) -> RepTriple {
        let row = |t: &Tensor<T>| t.row(i).iter().map(|v| v.as_f64()).collect();
        RepTriple {
            r_rgbd: row(&self.rgbd),
            r_rgb: row(&self.rgb),
            r_d: row(&self.d),
        }
    }
}

/// Checks `[N,3,H,W]` / `[N,1,H,W]` inputs against `cfg`.
pub fn check_inputs<T: Real>(cfg: &BlockConfig, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<()> {
    let [h, w] = cfg.input_size;
    let n = rgb.shape().first().copied().unwrap_or(0);
    if rgb.shape() != [n, 3, h, w] {
        return Err(Error::Shape {
            name: "rgb input".into(),
            expected: vec![n, 3, h, w],
            found: rgb.shape().to_vec(),
        });
    }
    if depth.shape() != [n, 1, h, w] {
        return Err(Error::Shape {
            name: "depth input".into(),
            expected: vec![n, 1, h, w],
            found: depth.shape().to_vec(),
        });
    }
    if !rgb.is_finite() || !depth.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    Ok(())
}

/// Representations of a batch of at least two samples. The heads normalize
/// over the batch, so a lone sample would collapse to the head shift.
pub fn encode<T: Real>(w: &EncoderWeights<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Reps<T>> {
    check_inputs(&w.cfg, rgb, depth)?;
    if rgb.shape()[0] < 2 {
        return Err(Error::Config("encode needs a batch of at least two samples".into()));
    }
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let r = g.constant(rgb.clone());
    let d = g.constant(depth.clone());
    let out = encode_graph(&mut g, &b, &w.cfg, r, d);
    Ok(Reps {
        rgbd: g.value(out.rgbd).clone(),
        rgb: g.value(out.rgb).clone(),
        d: g.value(out.d).clone(),
    })
}

/// Intermediate maps of a `C3`-fused encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMaps<T: Real = f32> {
    pub c3_rgb: Tensor<T>,
    pub c3_d: Tensor<T>,
    /// After the fusion 1×1 conv and ReLU.
    pub c3_fused: Tensor<T>,
    pub c4: Tensor<T>,
    pub c5: Tensor<T>,
}

pub fn forward_features<T: Real>(w: &EncoderWeights<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<FeatureMaps<T>> {
    if w.cfg.fuse_at != FuseLevel::C3 {
        return Err(Error::Config("feature maps are defined for C3 fusion only".into()));
    }
    check_inputs(&w.cfg, rgb, depth)?;
    let mut g = Graph::new();
    let b = w.bind(&mut g, false);
    let r = g.constant(rgb.clone());
    let d = g.constant(depth.clone());
    let bb = backbone_graph(&mut g, &b, &w.cfg, r, d, 5);
    let get = |v: Option<Var>| g.value(v.expect("fused stage present")).clone();
    Ok(FeatureMaps {
        c3_rgb: g.value(bb.c3_rgb).clone(),
        c3_d: g.value(bb.c3_d).clone(),
        c3_fused: get(bb.fused[3]),
        c4: get(bb.fused[4]),
        c5: get(bb.fused[5]),
    })
}
