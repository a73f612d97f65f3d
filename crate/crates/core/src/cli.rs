//! The `timclr` command line: one binary, one subcommand per stage.
//!
//! Every command reads an optional TOML [`RunConfig`], applies its flags on
//! top (flags win), and writes a resolved-config snapshot next to each
//! output. Exit codes: 0 success, 1 failed check or failed run, 2 usage or
//! configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::augment::TransformSpec;
use crate::data::{generate_synthetic, load_annotated, load_sequences, read_annotations_file, write_split, SamplerConfig, Split, SynthConfig};
use crate::detector::{read_detections, write_detections, DetectionRecord, DetectorConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_eval_csv, Interpolation, Predictions};
use crate::gradcheck::run_all;
use crate::loss::{GradCheckConfig, LossConfig};
use crate::network::{BlockConfig, FuseLevel};
use crate::pipeline::finetune::{predict, write_finetune_log};
use crate::pipeline::{
    derive_seed, run_ablation, write_step_log, AblationSetup, Axis, Checkpoint, FinetuneConfig, Finetuner, InitMode, PairingMode, PretrainConfig,
    PretrainSetup, Pretrainer,
};

/// Environment variable naming the default output root (`runs` otherwise).
pub const OUT_ROOT_ENV: &str = "TIMCLR_OUT";

/// Every configurable section in one document. Unknown keys are rejected;
/// absent keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub sampler: SamplerConfig,
    pub augment: TransformSpec,
    pub network: BlockConfig,
    pub loss: LossConfig,
    pub detector: DetectorConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub gradcheck: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn pretrain_setup(&self) -> PretrainSetup {
        PretrainSetup {
            sampler: self.sampler,
            augment: self.augment.clone(),
            network: self.network.clone(),
            loss: self.loss.clone(),
            pretrain: self.pretrain.clone(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "timclr", version, about = "RGB-D contrastive pretraining and detection at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic RGB-D dataset (pretrain, train and test splits).
    Synth(SynthArgs),
    /// Contrastive pretraining of the query and momentum encoders.
    Pretrain(PretrainArgs),
    /// Train the detector, optionally from a pretrained encoder.
    Finetune(FinetuneArgs),
    /// Run a detector checkpoint over a dataset split.
    Detect(DetectArgs),
    /// Score detection records against annotations.
    Eval(EvalArgs),
    /// Pretrain, finetune and score every ablation variant.
    Ablate(AblateArgs),
    /// Compare analytic and numeric gradients of both objectives.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output location; defaults to `$TIMCLR_OUT/<timestamp>-seed<seed>-<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub actors: Option<usize>,
    #[arg(long)]
    pub occluder_density: Option<f64>,
    /// Splits to write.
    #[arg(long, value_delimiter = ',', default_value = "pretrain,train,test")]
    pub splits: Vec<Split>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root in the on-disk layout.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "pretrain")]
    pub split: Split,
    #[arg(long)]
    pub pairing: Option<PairingMode>,
    #[arg(long)]
    pub delta_t: Option<usize>,
    #[arg(long)]
    pub fuse_at: Option<FuseLevel>,
    /// `on` or `off`; off zeroes both crossmodal weights.
    #[arg(long, value_parser = parse_switch)]
    pub crossmodal: Option<bool>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub m: Option<f64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "train")]
    pub split: Split,
    /// Held-out split scored during training; `none` disables it.
    #[arg(long, default_value = "test")]
    pub eval_split: String,
    /// Encoder checkpoint; required unless `--init random`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<InitMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub common: Common,
    /// Detector checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root in the on-disk layout.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Overrides the checkpoint's confidence threshold.
    #[arg(long)]
    pub conf: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Detection records written by `detect`.
    #[arg(long)]
    pub preds: PathBuf,
    /// An annotations file, or a dataset root (then `--split` picks the file).
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Dataset name written into the CSV.
    #[arg(long, default_value = "synthetic")]
    pub dataset: String,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset root with pretrain, train and test splits.
    #[arg(long)]
    pub data: PathBuf,
    /// Shared seed set; `--seed` alone means a single seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub axes: Option<Vec<Axis>>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub finetune_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

fn parse_switch(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected `on` or `off`, got `{s}`")),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Configuration, usage and missing-input problems are usage errors; the
/// rest are failed runs.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dataset(_) | Error::Io { .. } => 2,
        _ => 1,
    }
}

enum Outcome {
    Success,
    CheckFailed,
}

fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Pretrain(a) => cmd_pretrain(&a),
        Command::Finetune(a) => cmd_finetune(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

fn base_config(c: &Common) -> Result<RunConfig> {
    match &c.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

/// `--out`, else `$TIMCLR_OUT/<UTC timestamp>-seed<seed>-<command>`.
fn run_dir(c: &Common, seed: u64, command: &str) -> PathBuf {
    if let Some(out) = &c.out {
        return out.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stamp: String = humantime::format_rfc3339_seconds(SystemTime::now())
        .to_string()
        .chars()
        .filter(|ch| ch.is_ascii_alphanumeric())
        .collect();
    root.join(format!("{stamp}-seed{seed}-{command}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Snapshot beside an output: `config.toml` inside a directory, or
/// `<stem>.config.toml` next to a file.
fn write_snapshot(cfg: &RunConfig, output: &Path, is_dir: bool) -> Result<()> {
    let path = if is_dir {
        output.join("config.toml")
    } else {
        let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
        output.with_file_name(format!("{stem}.config.toml"))
    };
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn config_value(cfg: &RunConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Per-split synthetic seeds, so the three splits show different scenes.
pub fn split_seed(seed: u64, split: Split) -> u64 {
    match split {
        Split::Pretrain => seed,
        Split::Train => derive_seed(seed, 101),
        Split::Test => derive_seed(seed, 102),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<Outcome> {
    let mut cfg = base_config(&a.common)?;
    let s = &mut cfg.synth;
    s.seed = a.common.seed.unwrap_or(s.seed);
    s.num_sequences = a.sequences.unwrap_or(s.num_sequences);
    s.frames_per_sequence = a.frames.unwrap_or(s.frames_per_sequence);
    s.num_actors = a.actors.unwrap_or(s.num_actors);
    s.occluder_density = a.occluder_density.unwrap_or(s.occluder_density);
    cfg.synth.validate()?;
    let root = run_dir(&a.common, cfg.synth.seed, "synth");
    create_dir(&root)?;
    for &split in &a.splits {
        let sc = SynthConfig { seed: split_seed(cfg.synth.seed, split), ..cfg.synth.clone() };
        let data = generate_synthetic(&sc, split)?;
        write_split(&root, &data.dataset, Some(&data.boxes))?;
        eprintln!("{split}: {} sequences, {} frames", data.dataset.sequences.len(), data.dataset.num_frames());
    }
    write_snapshot(&cfg, &root, true)?;
    println!("{}", root.display());
    Ok(Outcome::Success)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<Outcome> {
    let mut cfg = base_config(&a.common)?;
    let p = &mut cfg.pretrain;
    p.seed = a.common.seed.unwrap_or(p.seed);
    p.pairing = a.pairing.unwrap_or(p.pairing);
    p.crossmodal = a.crossmodal.unwrap_or(p.crossmodal);
    p.epochs = a.epochs.unwrap_or(p.epochs);
    p.steps = a.steps.or(p.steps);
    p.batch_size = a.batch_size.unwrap_or(p.batch_size);
    p.lr = a.lr.unwrap_or(p.lr);
    p.m = a.m.unwrap_or(p.m);
    cfg.sampler.delta_t = a.delta_t.unwrap_or(cfg.sampler.delta_t);
    cfg.network.fuse_at = a.fuse_at.unwrap_or(cfg.network.fuse_at);
    // the snapshot records the weights actually optimized
    cfg.loss = cfg.pretrain_setup().effective_loss();
    let setup = cfg.pretrain_setup();
    setup.validate()?;
    let data = load_sequences(&a.data, a.split)?;
    let dir = run_dir(&a.common, cfg.pretrain.seed, "pretrain");
    create_dir(&dir)?;
    let trainer = Pretrainer::new(&setup, &data)?;
    let total = trainer.total_steps();
    let every = (total / 20).max(1);
    let out = trainer.run(|l| {
        if l.step % every == 0 || l.step + 1 == total {
            eprintln!("step {:>6}/{total}  L_MCL {:.4}  lr {:.5}", l.step + 1, l.loss_mcl, l.lr);
        }
    })?;
    out.checkpoint(Some(config_value(&cfg)?))?.save(&dir.join("encoder.ckpt"))?;
    write_step_log(&dir.join("pretrain_log.csv"), &out.history)?;
    write_snapshot(&cfg, &dir, true)?;
    println!("{}", dir.display());
    Ok(Outcome::Success)
}

fn cmd_finetune(a: &FinetuneArgs) -> Result<Outcome> {
    let mut cfg = base_config(&a.common)?;
    let f = &mut cfg.finetune;
    f.seed = a.common.seed.unwrap_or(f.seed);
    f.init_mode = a.init.unwrap_or(f.init_mode);
    f.epochs = a.epochs.unwrap_or(f.epochs);
    f.steps = a.steps.or(f.steps);
    f.batch_size = a.batch_size.unwrap_or(f.batch_size);
    f.lr = a.lr.unwrap_or(f.lr);
    cfg.finetune.validate()?;
    cfg.detector.validate()?;
    let encoder = match (cfg.finetune.init_mode, &a.checkpoint) {
        (InitMode::Timclr, None) => return Err(Error::Config("finetune: --checkpoint is required unless --init random".into())),
        (InitMode::Timclr, Some(p)) => {
            let enc = Checkpoint::load(p)?.query_encoder()?;
            // the backbone shape comes from the checkpoint
            cfg.network = enc.cfg.clone();
            Some(enc)
        }
        (InitMode::Random, _) => None,
    };
    let train = load_annotated(&a.data, a.split)?;
    let held_out = match a.eval_split.as_str() {
        "none" => None,
        s => Some(load_annotated(&a.data, s.parse()?)?),
    };
    let dir = run_dir(&a.common, cfg.finetune.seed, "finetune");
    create_dir(&dir)?;
    let tuner = Finetuner::new(&train, encoder.as_ref(), &cfg.network, &cfg.detector, &cfg.finetune)?;
    let total = tuner.total_steps();
    let every = (total / 20).max(1);
    let out = tuner.run(held_out.as_deref(), |l, e| {
        if l.step % every == 0 || l.step + 1 == total {
            eprintln!("step {:>6}/{total}  loss {:.4}", l.step + 1, l.loss);
        }
        if let Some(e) = e {
            eprintln!("step {:>6}  held-out AP50 {:.4}  AP {:.4}", e.step, e.ap50, e.ap);
        }
    })?;
    out.checkpoint(config_value(&cfg)?).save(&dir.join("detector.ckpt"))?;
    write_finetune_log(&dir.join("finetune_log.csv"), &out.history)?;
    let mut evals = String::from("step,AP50,AP\n");
    for e in &out.evals {
        evals.push_str(&format!("{},{},{}\n", e.step, e.ap50, e.ap));
    }
    let path = dir.join("finetune_eval.csv");
    fs::write(&path, evals).map_err(|e| Error::io(&path, e))?;
    write_json(&dir.join("transfer.json"), &serde_json::json!({"copied": out.transfer.copied, "fresh": out.transfer.fresh}))?;
    write_snapshot(&cfg, &dir, true)?;
    println!("{}", dir.display());
    Ok(Outcome::Success)
}

fn cmd_detect(a: &DetectArgs) -> Result<Outcome> {
    let mut cfg = base_config(&a.common)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut w = ckpt.to_detector()?;
    if let Some(c) = a.conf {
        w.cfg.conf_threshold = c;
    }
    w.cfg.validate()?;
    cfg.network = w.block.clone();
    cfg.detector = w.cfg.clone();
    let data = load_sequences(&a.input, a.split)?;
    let frames: Vec<_> = data
        .sequences
        .into_iter()
        .flatten()
        .map(|frame| crate::data::AnnotatedFrame { frame, boxes: Vec::new() })
        .collect();
    let preds = predict(&w, &frames, 8)?;
    let records: Vec<DetectionRecord> = frames
        .iter()
        .map(|f| {
            let key = (f.frame.seq_id.clone(), f.frame.frame_idx);
            DetectionRecord::new(&f.frame.seq_id, f.frame.frame_idx, &preds[&key])
        })
        .collect();
    let out = match &a.common.out {
        Some(p) => p.clone(),
        None => run_dir(&a.common, ckpt.meta.seed, "detect").join("preds.json"),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_detections(&out, &records)?;
    write_snapshot(&cfg, &out, false)?;
    eprintln!("{} frames, {} detections", records.len(), records.iter().map(|r| r.detections.len()).sum::<usize>());
    println!("{}", out.display());
    Ok(Outcome::Success)
}

fn cmd_eval(a: &EvalArgs) -> Result<Outcome> {
    let cfg = base_config(&a.common)?;
    let records = read_detections(&a.preds)?;
    let gt_file = if a.gt.is_dir() {
        let nested = a.gt.join(a.split.as_str()).join(crate::data::ANNOTATIONS_FILE);
        if nested.is_file() {
            nested
        } else {
            a.gt.join(crate::data::ANNOTATIONS_FILE)
        }
    } else {
        a.gt.clone()
    };
    let gts = read_annotations_file(&gt_file)?;
    let mut preds = Predictions::new();
    for r in &records {
        preds.entry((r.seq_id.clone(), r.frame_idx)).or_default().extend(r.detections());
    }
    let result = evaluate(&preds, &gts, Interpolation::Point101)?;
    let out = match &a.common.out {
        Some(p) => p.clone(),
        None => run_dir(&a.common, 0, "eval").join("metrics.csv"),
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_eval_csv(&out, &result, &a.dataset, a.split.as_str())?;
    write_snapshot(&cfg, &out, false)?;
    println!("AP50 {:.4}  AP@[.5:.95] {:.4}", result.ap50, result.ap_50_95);
    eprintln!("{}", out.display());
    Ok(Outcome::Success)
}

fn cmd_ablate(a: &AblateArgs) -> Result<Outcome> {
    let mut cfg = base_config(&a.common)?;
    if let Some(s) = a.pretrain_steps {
        cfg.pretrain.steps = Some(s);
    }
    if let Some(s) = a.finetune_steps {
        cfg.finetune.steps = Some(s);
    }
    let seeds = match (&a.seeds, a.common.seed) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => vec![s],
        (None, None) => vec![0, 1, 2],
    };
    let base = cfg.pretrain_setup();
    base.validate()?;
    cfg.finetune.validate()?;
    cfg.detector.validate()?;
    let mut setup = AblationSetup::new(base, cfg.detector.clone(), cfg.finetune.clone(), seeds);
    if let Some(axes) = &a.axes {
        setup.axes = axes.clone();
    }
    let pre = load_sequences(&a.data, Split::Pretrain)?;
    let train = load_annotated(&a.data, Split::Train)?;
    let test = load_annotated(&a.data, Split::Test)?;
    let dir = run_dir(&a.common, setup.seeds[0], "ablate");
    create_dir(&dir)?;
    let report = run_ablation(&setup, &pre, &train, &test, |m| eprintln!("training {m}"))?;
    report.write_csv(&dir.join("ablation.csv"))?;
    report.write_metadata(&dir.join("ablation_meta.json"), &setup)?;
    write_snapshot(&cfg, &dir, true)?;
    for r in &report.rows {
        println!("{:<10} {:<14} AP {:.4}  AP50 {:.4}", r.axis.as_str(), r.variant, r.ap, r.ap50);
    }
    eprintln!("{}", dir.display());
    Ok(Outcome::Success)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<Outcome> {
    let mut cfg = base_config(&a.common)?;
    let g = &mut cfg.gradcheck;
    g.seed = a.common.seed.unwrap_or(g.seed);
    g.eps = a.eps.unwrap_or(g.eps);
    g.samples = a.samples.unwrap_or(g.samples);
    g.tolerance = a.tolerance.unwrap_or(g.tolerance);
    if !(cfg.gradcheck.eps > 0.0) || cfg.gradcheck.samples == 0 {
        return Err(Error::Config("gradcheck: eps must be positive and samples at least 1".into()));
    }
    let dir = run_dir(&a.common, cfg.gradcheck.seed, "gradcheck");
    let summary = match run_all(&cfg.gradcheck, &cfg.loss) {
        Ok(s) => s,
        Err(e @ Error::NonFinite(_)) => {
            eprintln!("gradcheck FAILED: {e}");
            return Ok(Outcome::CheckFailed);
        }
        Err(e) => return Err(e),
    };
    create_dir(&dir)?;
    write_json(&dir.join("gradcheck.json"), &summary)?;
    write_snapshot(&cfg, &dir, true)?;
    for (name, r) in [("L_MCL", &summary.mcl), ("detection", &summary.detection)] {
        println!(
            "{name:<10} {} max rel error {:.3e} at coordinate {} ({} checked, {} nonzero)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.worst_index,
            r.checked,
            r.nonzero
        );
    }
    Ok(if summary.passed() { Outcome::Success } else { Outcome::CheckFailed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["bogus = 1", "[pretrain]\nlearning_rate = 0.1", "[extra]\n"] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let cfg = RunConfig::from_toml("[pretrain]\nlr = 0.1\n[network]\nfuse_at = \"C4\"").unwrap();
        assert_eq!(cfg.pretrain.lr, 0.1);
        assert_eq!(cfg.network.fuse_at, FuseLevel::C4);
    }

    #[test]
    fn switches_parse() {
        assert_eq!(parse_switch("off"), Ok(false));
        assert_eq!(parse_switch("on"), Ok(true));
        assert!(parse_switch("maybe").is_err());
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["timclr", "pretrain"]), 2);
        assert_eq!(run(["timclr", "frobnicate"]), 2);
        assert_eq!(run(["timclr", "pretrain", "--data", "x", "--crossmodal", "maybe"]), 2);
        assert_eq!(run(["timclr", "--help"]), 0);
    }

    #[test]
    fn split_seeds_differ() {
        let s: Vec<u64> = [Split::Pretrain, Split::Train, Split::Test].iter().map(|&sp| split_seed(7, sp)).collect();
        assert!(s[0] != s[1] && s[1] != s[2] && s[0] != s[2]);
    }
}
