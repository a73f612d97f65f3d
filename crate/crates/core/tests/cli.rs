use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use timclr::cli::RunConfig;
use timclr::data::{load_annotations, load_sequences, Split};
use timclr::detector::{read_detections, write_detections, Detection, DetectionRecord};

/// Small enough for a debug build: narrow network, short runs.
const TINY: &str = r#"
[synth]
num_sequences = 2
frames_per_sequence = 12

[sampler]
delta_t = 3

[network]
widths = [4, 4, 8, 8, 8]
rep_dim = 8

[pretrain]
steps = 4
batch_size = 4

[finetune]
steps = 4
batch_size = 4
"#;

fn timclr(args: &[&str], env_out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timclr"))
        .args(args)
        .env("TIMCLR_OUT", env_out)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert_eq!(out.status.code(), Some(0), "stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let data = dir.path().join("data");
        let f = Self { dir, config, data };
        ok(&f.run(&["synth", "--seed", "7", "--out", f.data.to_str().unwrap()]));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs a subcommand with the tiny config prepended to its flags.
    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec![args[0], "--config", self.config.to_str().unwrap()];
        all.extend_from_slice(&args[1..]);
        timclr(&all, self.dir.path())
    }
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_twice_gives_identical_trees_that_load_back() {
    let f = Fixture::new();
    let again = f.path("again");
    ok(&f.run(&["synth", "--seed", "7", "--out", again.to_str().unwrap()]));
    assert_eq!(tree(&f.data), tree(&again));
    assert!(f.data.join("config.toml").is_file());
    for split in [Split::Pretrain, Split::Train, Split::Test] {
        let seqs = load_sequences(&f.data, split).unwrap();
        assert_eq!(seqs.sequences.len(), 2);
        assert_eq!(seqs.num_frames(), 24);
        let ann = load_annotations(&f.data, split).unwrap();
        assert_eq!(ann.len(), 24);
    }
    // splits show different scenes
    let pre = load_sequences(&f.data, Split::Pretrain).unwrap();
    let test = load_sequences(&f.data, Split::Test).unwrap();
    assert_ne!(pre.sequences[0][0].rgb, test.sequences[0][0].rgb);
}

#[test]
fn flags_override_the_config_file() {
    let f = Fixture::new();
    let out = f.path("flags");
    ok(&f.run(&["synth", "--seed", "3", "--sequences", "1", "--frames", "5", "--splits", "train", "--out", out.to_str().unwrap()]));
    let data = load_sequences(&out, Split::Train).unwrap();
    assert_eq!((data.sequences.len(), data.num_frames()), (1, 5));
    let snap = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(snap.synth.num_sequences, 1);
    assert_eq!(snap.synth.seed, 3);
    // untouched keys keep the file's values
    assert_eq!(snap.network.widths, [4, 4, 8, 8, 8]);
    assert!(!out.join("pretrain").exists());
}

#[test]
fn config_and_usage_errors_exit_with_two() {
    let f = Fixture::new();
    let bad = f.path("bad");
    assert_eq!(f.run(&["synth", "--actors", "0", "--out", bad.to_str().unwrap()]).status.code(), Some(2));
    let missing = f.path("nowhere");
    assert_eq!(f.run(&["pretrain", "--data", missing.to_str().unwrap(), "--out", f.path("p").to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(f.run(&["pretrain"]).status.code(), Some(2), "--data is required");
    assert_eq!(timclr(&["frobnicate"], f.dir.path()).status.code(), Some(2));

    let unknown = f.path("unknown.toml");
    fs::write(&unknown, "[pretrain]\nlearning_rate = 0.1\n").unwrap();
    let out = timclr(&["gradcheck", "--config", unknown.to_str().unwrap(), "--samples", "1"], f.dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn pretrain_without_crossmodal_zeroes_both_weights() {
    let f = Fixture::new();
    let run = f.path("pre");
    ok(&f.run(&["pretrain", "--data", f.data.to_str().unwrap(), "--crossmodal", "off", "--delta-t", "2", "--seed", "1", "--out", run.to_str().unwrap()]));
    let snap = RunConfig::load(&run.join("config.toml")).unwrap();
    assert!(!snap.pretrain.crossmodal);
    assert_eq!((snap.loss.lambda_rgb_d, snap.loss.lambda_d_rgb), (0.0, 0.0));
    assert_eq!(snap.loss.lambda_rgbd, 1.0);
    assert_eq!(snap.sampler.delta_t, 2);

    let log = fs::read_to_string(run.join("pretrain_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,loss_mcl,loss_rgbd,loss_rgb_d,loss_d_rgb,lr"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        // the crossmodal terms are still measured but carry no weight
        assert_eq!(r[1], r[2]);
        assert!(r[3] > 0.0 && r[4] > 0.0);
    }
}

#[test]
fn full_chain_writes_one_record_per_frame_and_scores_itself() {
    let f = Fixture::new();
    let data = f.data.to_str().unwrap();
    let pre = f.path("pre");
    ok(&f.run(&["pretrain", "--data", data, "--seed", "2", "--out", pre.to_str().unwrap()]));
    let ckpt = pre.join("encoder.ckpt");
    let before = fs::read(&ckpt).unwrap();

    let fin = f.path("fin");
    ok(&f.run(&["finetune", "--data", data, "--checkpoint", ckpt.to_str().unwrap(), "--out", fin.to_str().unwrap()]));
    assert_eq!(fs::read(&ckpt).unwrap(), before, "finetune must not touch the encoder checkpoint");
    for name in ["detector.ckpt", "finetune_log.csv", "finetune_eval.csv", "transfer.json", "config.toml"] {
        assert!(fin.join(name).is_file(), "{name}");
    }

    let preds = f.path("out/preds.json");
    ok(&f.run(&["detect", "--checkpoint", fin.join("detector.ckpt").to_str().unwrap(), "--input", data, "--conf", "0.02", "--out", preds.to_str().unwrap()]));
    let records = read_detections(&preds).unwrap();
    assert_eq!(records.len(), 24);
    let mut keys: Vec<_> = records.iter().map(|r| (r.seq_id.clone(), r.frame_idx)).collect();
    keys.dedup();
    assert_eq!(keys.len(), 24);
    assert!(f.path("out/preds.config.toml").is_file());

    let metrics = f.path("out/metrics.csv");
    let out = ok(&f.run(&["eval", "--preds", preds.to_str().unwrap(), "--gt", data, "--out", metrics.to_str().unwrap()]));
    assert!(out.starts_with("AP50 "), "{out}");
    let csv = fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("dataset,split,class,threshold,AP\n"));
    assert!(csv.contains(",AP50,") && csv.contains(",AP@[.5:.95],"), "{csv}");
}

#[test]
fn ground_truth_as_predictions_scores_one_everywhere() {
    let f = Fixture::new();
    let ann = load_annotations(&f.data, Split::Test).unwrap();
    let records: Vec<DetectionRecord> = ann
        .iter()
        .map(|((seq, idx), boxes)| {
            let dets: Vec<Detection> = boxes.iter().map(|&bbox| Detection { bbox, score: 1.0 }).collect();
            DetectionRecord::new(seq.clone(), *idx, &dets)
        })
        .collect();
    let preds = f.path("perfect.json");
    write_detections(&preds, &records).unwrap();
    let gt_file = f.data.join("test").join("annotations.json");
    let metrics = f.path("perfect.csv");
    ok(&f.run(&["eval", "--preds", preds.to_str().unwrap(), "--gt", gt_file.to_str().unwrap(), "--out", metrics.to_str().unwrap()]));
    let csv = fs::read_to_string(&metrics).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let ap: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(ap, 1.0, "{line}");
        rows += 1;
    }
    // class 0 and `all` at ten thresholds, plus two summary rows
    assert_eq!(rows, 22);
}

#[test]
fn gradcheck_accepts_step_and_sample_flags() {
    let f = Fixture::new();
    let run = f.path("gc");
    let out = timclr(&["gradcheck", "--eps", "1e-4", "--samples", "200", "--out", run.to_str().unwrap()], f.dir.path());
    let text = ok(&out);
    assert_eq!(text.lines().filter(|l| l.contains("PASS")).count(), 2, "{text}");
    let snap = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!((snap.gradcheck.eps, snap.gradcheck.samples), (1e-4, 200));
    assert!(run.join("gradcheck.json").is_file());
}

#[test]
fn default_output_root_comes_from_the_environment() {
    let f = Fixture::new();
    let root = f.path("runs");
    let out = Command::new(env!("CARGO_BIN_EXE_timclr"))
        .args(["synth", "--config", f.config.to_str().unwrap(), "--seed", "9", "--splits", "test"])
        .env("TIMCLR_OUT", &root)
        .output()
        .unwrap();
    let printed = PathBuf::from(ok(&out));
    assert!(printed.starts_with(&root), "{}", printed.display());
    let name = printed.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.ends_with("-seed9-synth"), "{name}");
    assert!(load_sequences(&printed, Split::Test).is_ok());
}
