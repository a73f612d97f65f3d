//! RGB-D sequences: frame types, the on-disk layout, temporal pair sampling
//! and the synthetic scene generator.

mod io;
mod sampler;
mod synth;

pub use io::{
    load_annotated, load_annotations, load_sequences, read_annotations_file, read_depth, read_rgb, write_depth, write_rgb, write_split, AnnotationRecord,
    Annotations, ANNOTATIONS_FILE,
};
pub use sampler::{sample_pair, PairSampler};
pub use synth::{generate_synthetic, SynthConfig, SyntheticData};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Millimetres mapped to 1.0 at network input.
pub const DEPTH_SCALE_MM: f64 = 10_000.0;

/// Interleaved 8-bit RGB, row-major `H×W×3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, px: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&px);
    }

    /// Channel-planar `[3,H,W]` with values in `[0,1]`.
    pub fn to_planar<T: Real>(&self) -> Tensor<T> {
        let plane = self.width * self.height;
        let mut out = vec![T::zero(); 3 * plane];
        let inv = T::lit(1.0 / 255.0);
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = T::lit(px[c] as f64) * inv;
            }
        }
        Tensor::from_vec(&[3, self.height, self.width], out)
    }
}

/// 16-bit depth in millimetres, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u16>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u16 {
        self.data[y * self.width + x]
    }

    /// `[1,H,W]`, millimetres divided by [`DEPTH_SCALE_MM`] and clamped to `[0,1]`.
    pub fn to_unit<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&d| T::lit(unit_depth(d))).collect();
        Tensor::from_vec(&[1, self.height, self.width], data)
    }
}

#[inline]
pub fn unit_depth(mm: u16) -> f64 {
    (mm as f64 / DEPTH_SCALE_MM).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub seq_id: String,
    pub frame_idx: usize,
}

impl Frame {
    pub fn new(rgb: RgbImage, depth: DepthImage, seq_id: impl Into<String>, frame_idx: usize) -> Result<Self> {
        if rgb.width != depth.width || rgb.height != depth.height {
            return Err(Error::Dataset(format!(
                "rgb {}x{} and depth {}x{} differ",
                rgb.width, rgb.height, depth.width, depth.height
            )));
        }
        Ok(Self {
            rgb,
            depth,
            seq_id: seq_id.into(),
            frame_idx,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    /// Network-ready `([3,H,W], [1,H,W])` at native resolution.
    pub fn to_tensors<T: Real>(&self) -> (Tensor<T>, Tensor<T>) {
        (self.rgb.to_planar(), self.depth.to_unit())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub sequences: Vec<Vec<Frame>>,
    pub split: Split,
}

impl SequenceDataset {
    /// Checks that sequences are non-empty and ordered by strictly increasing
    /// `frame_idx` under a single `seq_id`.
    pub fn new(sequences: Vec<Vec<Frame>>, split: Split) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Dataset("no sequences found".into()));
        }
        for seq in &sequences {
            let Some(first) = seq.first() else {
                return Err(Error::Dataset("empty sequence".into()));
            };
            for pair in seq.windows(2) {
                if pair[1].seq_id != first.seq_id || pair[1].frame_idx <= pair[0].frame_idx {
                    return Err(Error::Dataset(format!(
                        "sequence `{}` is not ordered by frame index",
                        first.seq_id
                    )));
                }
            }
        }
        Ok(Self { sequences, split })
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &Frame> {
        self.sequences.iter().flatten()
    }
}

/// Axis-aligned box in pixels, corner form.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub class_id: usize,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, class_id: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            class_id,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64, class_id: usize) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0, class_id)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max && [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
    }

    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
            self.class_id,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedFrame {
    pub frame: Frame,
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub delta_t: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { delta_t: 50, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PairSample<'a> {
    pub view1: &'a Frame,
    pub view2: &'a Frame,
}
