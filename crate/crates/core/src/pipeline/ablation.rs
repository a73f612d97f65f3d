//! The ablation matrix: one row per variant along three axes (pairing
//! mode, fusion level, crossmodal loss), everything else held at the base
//! configuration. Each cell pretrains, finetunes and scores on one shared
//! test split for every seed of a shared seed set.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::config_hash;
use super::finetune::{evaluate_detector, finetune, FinetuneConfig, InitMode};
use super::pretrain::{pretrain, PairingMode, PretrainSetup};
use crate::data::{AnnotatedFrame, SequenceDataset};
use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::network::FuseLevel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Pairing,
    FuseAt,
    Crossmodal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Pairing, Axis::FuseAt, Axis::Crossmodal];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Pairing => "pairing",
            Axis::FuseAt => "fuse_at",
            Axis::Crossmodal => "crossmodal",
        }
    }

    /// Variant names and the setup each one trains.
    pub fn variants(self, base: &PretrainSetup) -> Vec<(String, PretrainSetup)> {
        match self {
            Axis::Pairing => PairingMode::ALL
                .iter()
                .map(|&m| {
                    let mut s = base.clone();
                    s.pretrain.pairing = m;
                    (m.to_string(), s)
                })
                .collect(),
            Axis::FuseAt => FuseLevel::ALL
                .iter()
                .map(|&f| {
                    let mut s = base.clone();
                    s.network.fuse_at = f;
                    (f.to_string(), s)
                })
                .collect(),
            Axis::Crossmodal => [true, false]
                .iter()
                .map(|&on| {
                    let mut s = base.clone();
                    s.pretrain.crossmodal = on;
                    (if on { "on" } else { "off" }.to_string(), s)
                })
                .collect(),
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (pairing, fuse_at, crossmodal)")))
    }
}

/// Full-scale `(axis, variant, AP, AP50)` figures in percent, reported next
/// to desk-scale numbers for qualitative comparison only.
pub const FULL_SCALE_REFERENCE: [(&str, &str, f64, f64); 8] = [
    ("pairing", "augment_only", 58.10, 90.40),
    ("pairing", "temporal_only", 48.70, 90.30),
    ("pairing", "combined", 60.10, 94.30),
    ("fuse_at", "C3", 60.10, 94.30),
    ("fuse_at", "C4", 57.40, 90.10),
    ("fuse_at", "C5", 54.20, 87.40),
    ("crossmodal", "on", 60.10, 94.30),
    ("crossmodal", "off", 57.80, 90.30),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub base: PretrainSetup,
    pub detector: DetectorConfig,
    pub finetune: FinetuneConfig,
    /// Every cell runs once per seed; pretraining and finetuning share it.
    pub seeds: Vec<u64>,
    pub axes: Vec<Axis>,
}

impl AblationSetup {
    pub fn new(base: PretrainSetup, detector: DetectorConfig, finetune: FinetuneConfig, seeds: Vec<u64>) -> Self {
        Self {
            base,
            detector,
            finetune,
            seeds,
            axes: Axis::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedScore {
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub final_loss_mcl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: Axis,
    pub variant: String,
    /// Mean over seeds of AP@[.5:.95].
    pub ap: f64,
    /// Mean over seeds of AP50.
    pub ap50: f64,
    pub per_seed: Vec<SeedScore>,
    /// Hash of the variant's pretraining setup with the seed left at the base value.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    /// Distinct (setup, seed) runs actually trained.
    pub runs_trained: usize,
}

impl AblationReport {
    pub fn row(&self, axis: Axis, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.axis == axis && r.variant == variant)
    }

    /// Rows `axis,variant,AP,AP50`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("axis,variant,AP,AP50\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.axis, r.variant, r.ap, r.ap50));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Seeds, per-seed scores, config hashes and the full-scale reference.
    pub fn write_metadata(&self, path: &Path, setup: &AblationSetup) -> Result<()> {
        let reference: Vec<_> = FULL_SCALE_REFERENCE
            .iter()
            .map(|(axis, variant, ap, ap50)| serde_json::json!({"axis": axis, "variant": variant, "AP": ap, "AP50": ap50}))
            .collect();
        let meta = serde_json::json!({
            "seeds": self.seeds,
            "runs_trained": self.runs_trained,
            "setup": setup,
            "rows": self.rows,
            "full_scale_reference_percent": reference,
        });
        std::fs::write(path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(path, e))
    }
}

/// Trains and scores every variant of `setup.axes` for every seed.
/// Variants with identical setups (the base appears once per axis) are
/// trained once and shared.
pub fn run_ablation(
    setup: &AblationSetup,
    pretrain_data: &SequenceDataset,
    det_train: &[AnnotatedFrame],
    test: &[AnnotatedFrame],
    mut progress: impl FnMut(&str),
) -> Result<AblationReport> {
    if setup.seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if test.is_empty() {
        return Err(Error::Dataset("ablation test split is empty".into()));
    }
    let mut cache: HashMap<(String, u64), SeedScore> = HashMap::new();
    let mut rows = Vec::new();
    for &axis in &setup.axes {
        for (variant, ps) in axis.variants(&setup.base) {
            let key = serde_json::to_string(&ps)?;
            let mut per_seed = Vec::with_capacity(setup.seeds.len());
            for &seed in &setup.seeds {
                if let Some(hit) = cache.get(&(key.clone(), seed)) {
                    per_seed.push(hit.clone());
                    continue;
                }
                progress(&format!("{axis}={variant} seed={seed}"));
                let score = run_cell(&ps, setup, seed, pretrain_data, det_train, test)?;
                cache.insert((key.clone(), seed), score.clone());
                per_seed.push(score);
            }
            let n = per_seed.len() as f64;
            rows.push(AblationRow {
                axis,
                variant,
                ap: per_seed.iter().map(|s| s.ap).sum::<f64>() / n,
                ap50: per_seed.iter().map(|s| s.ap50).sum::<f64>() / n,
                per_seed,
                config_hash: config_hash(&serde_json::to_value(&ps)?),
            });
        }
    }
    Ok(AblationReport {
        rows,
        seeds: setup.seeds.clone(),
        runs_trained: cache.len(),
    })
}

fn run_cell(
    ps: &PretrainSetup,
    setup: &AblationSetup,
    seed: u64,
    pretrain_data: &SequenceDataset,
    det_train: &[AnnotatedFrame],
    test: &[AnnotatedFrame],
) -> Result<SeedScore> {
    let mut ps = ps.clone();
    ps.pretrain.seed = seed;
    let pre = pretrain(&ps, pretrain_data)?;
    let ft = FinetuneConfig {
        seed,
        init_mode: InitMode::Timclr,
        ..setup.finetune.clone()
    };
    let out = finetune(det_train, None, Some(&pre.encoders.q), &ps.network, &setup.detector, &ft)?;
    let r = evaluate_detector(&out.weights, test, ft.eval_conf_threshold)?;
    Ok(SeedScore {
        seed,
        ap: r.ap_50_95,
        ap50: r.ap50,
        final_loss_mcl: pre.history.last().map_or(f64::NAN, |l| l.loss_mcl),
    })
}
