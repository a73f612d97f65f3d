//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes   "TIMCLR01"
//! meta_len   u64
//! meta       JSON (CheckpointMeta)
//! count      u32
//! count × { name_len u16, name utf-8, ndim u8, dims u32×ndim, data f32×numel }
//! digest     32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Arrays are written in name order, and `serde_json` emits object keys
//! sorted, so a loaded checkpoint re-serializes to the same bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::detector::{build_detector, DetectorConfig, DetectorWeights};
use crate::error::{Error, Result};
use crate::network::{init_weights, BlockConfig, EncoderPair, EncoderWeights, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC_PREFIX: &[u8; 6] = b"TIMCLR";
pub const VERSION: &[u8; 2] = b"01";
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Query and momentum encoders, arrays prefixed `q/` and `k/`.
    Encoder,
    Detector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    /// Network shape the arrays were built for.
    pub network: BlockConfig,
    pub detector: Option<DetectorConfig>,
    /// Momentum coefficient of an encoder pair.
    pub momentum: Option<f64>,
    /// Resolved configuration of the producing run.
    pub config: Value,
    /// Hex SHA-256 of `config` serialized as compact JSON.
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    /// Most recent per-step loss values.
    pub loss_tail: Vec<f64>,
}

impl CheckpointMeta {
    pub fn new(kind: CheckpointKind, network: BlockConfig, config: Value) -> Self {
        Self {
            kind,
            network,
            detector: None,
            momentum: None,
            config_hash: config_hash(&config),
            config,
            epoch: 0,
            step: 0,
            seed: 0,
            loss_tail: Vec::new(),
        }
    }
}

pub fn config_hash(config: &Value) -> String {
    let bytes = serde_json::to_vec(config).expect("JSON values always serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let payload: usize = self.arrays.values().map(|t| t.numel() * 4 + 64).sum();
        let mut out = Vec::with_capacity(64 + meta.len() + payload);
        out.extend_from_slice(MAGIC_PREFIX);
        out.extend_from_slice(VERSION);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = u32::try_from(self.arrays.len()).map_err(|_| Error::Checkpoint("too many arrays".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.arrays {
            let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("array name too long: {name}")))?;
            let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("`{name}` has too many dims")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("`{name}` dimension too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC_PREFIX.len() + VERSION.len() || &bytes[..6] != MAGIC_PREFIX {
            return Err(Error::Checkpoint("not a checkpoint (bad magic tag)".into()));
        }
        let version = &bytes[6..8];
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {:?}; this build reads {}",
                String::from_utf8_lossy(version),
                String::from_utf8_lossy(VERSION)
            )));
        }
        let truncated = || Error::Checkpoint(format!("truncated file (format {})", String::from_utf8_lossy(VERSION)));
        if bytes.len() < 8 + DIGEST_LEN {
            return Err(truncated());
        }
        // fields may not run into the digest trailer
        let body_end = bytes.len() - DIGEST_LEN;
        let mut r = Reader { buf: &bytes[..body_end], at: 8 };
        let meta_len = usize::try_from(u64::from_le_bytes(r.take(8).ok_or_else(truncated)?.try_into().expect("8 bytes"))).map_err(|_| truncated())?;
        let meta_bytes = r.take(meta_len).ok_or_else(truncated)?;
        let count = u32::from_le_bytes(r.take(4).ok_or_else(truncated)?.try_into().expect("4 bytes"));
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2).ok_or_else(truncated)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let ndim = r.take(1).ok_or_else(truncated)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(r.take(4).ok_or_else(truncated)?.try_into().expect("4 bytes")) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(truncated)?).ok_or_else(truncated)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if arrays.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
                return Err(Error::Checkpoint(format!("duplicate array `{name}`")));
            }
        }
        if r.at != body_end {
            return Err(Error::Checkpoint(format!("{} unexpected bytes before the digest", body_end - r.at)));
        }
        if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
            return Err(Error::Checkpoint("checksum mismatch (corrupt payload)".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if config_hash(&meta.config) != meta.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        Ok(Self { meta, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn from_encoders(pair: &EncoderPair<f32>, mut meta: CheckpointMeta) -> Self {
        meta.kind = CheckpointKind::Encoder;
        meta.network = pair.q.cfg.clone();
        meta.momentum = Some(pair.m);
        let mut arrays = BTreeMap::new();
        for (prefix, w) in [("q/", &pair.q), ("k/", &pair.k)] {
            for (name, t) in w.iter() {
                arrays.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        Self { meta, arrays }
    }

    /// Rebuilds both encoders, validating every array against a freshly
    /// initialized template of `meta.network`.
    pub fn to_encoders(&self) -> Result<EncoderPair<f32>> {
        self.expect_kind(CheckpointKind::Encoder)?;
        self.meta.network.validate()?;
        let template = init_weights::<f32>(&self.meta.network, 0);
        let mut q = template.clone();
        let mut k = template;
        let mut used = 0;
        for (prefix, w) in [("q/", &mut q), ("k/", &mut k)] {
            for (_, part) in w.partitions_mut() {
                used += self.fill(prefix, part)?;
            }
        }
        self.reject_extra(used)?;
        let m = self.meta.momentum.ok_or_else(|| Error::Checkpoint("encoder checkpoint without momentum".into()))?;
        Ok(EncoderPair { q, k, m })
    }

    /// The query encoder alone.
    pub fn query_encoder(&self) -> Result<EncoderWeights<f32>> {
        Ok(self.to_encoders()?.q)
    }

    pub fn from_detector(w: &DetectorWeights<f32>, mut meta: CheckpointMeta) -> Self {
        meta.kind = CheckpointKind::Detector;
        meta.network = w.block.clone();
        meta.detector = Some(w.cfg.clone());
        let arrays = w.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Self { meta, arrays }
    }

    pub fn to_detector(&self) -> Result<DetectorWeights<f32>> {
        self.expect_kind(CheckpointKind::Detector)?;
        let cfg = self.meta.detector.clone().ok_or_else(|| Error::Checkpoint("detector checkpoint without detector config".into()))?;
        let (mut w, _) = build_detector::<f32>(None, &self.meta.network, &cfg, 0)?;
        let mut used = 0;
        for (_, part) in w.partitions_mut() {
            used += self.fill("", part)?;
        }
        self.reject_extra(used)?;
        Ok(w)
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind:?} checkpoint, found {:?}", self.meta.kind)));
        }
        Ok(())
    }

    fn fill(&self, prefix: &str, part: &mut ParamSet<f32>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in part.iter_mut() {
            let key = format!("{prefix}{name}");
            let src = self.arrays.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing array `{key}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Shape {
                    name: key,
                    expected: t.shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
            *t = src.clone();
            n += 1;
        }
        Ok(n)
    }

    fn reject_extra(&self, used: usize) -> Result<()> {
        if used != self.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "{} arrays do not belong to the declared network",
                self.arrays.len() - used
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.at.checked_add(n)?;
        let s = self.buf.get(self.at..end)?;
        self.at = end;
        Some(s)
    }
}
