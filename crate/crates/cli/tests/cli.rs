use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfn_core::backbone::Model;
use cfn_core::dataio::{load_checkpoint, read_split};
use cfn_core::losseval::{evaluate, EvalMode};
use tempfile::TempDir;

const SMALL: &[&str] = &[
    "data.train_clips=6",
    "data.val_clips=3",
    "data.frames=32",
    "data.height=4",
    "data.width=4",
    "data.bursts_min=1",
    "data.bursts_max=2",
    "data.burst_len_min=3",
    "data.burst_len_max=6",
    "network.channels=4,6,8",
    "network.blocks=1,1,1",
    "network.coarse_frames=16",
    "network.fine_frames=32",
    "network.head_channels=8",
    "network.fc_channels=6",
    "network.confidence_hidden=4",
    "train.batch_size=3",
];

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs `cfn` with the small settings, the sandbox data directory and `args`.
    fn cfn(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_cfn"));
        cmd.current_dir(self.dir.path()).env("CFN_LOG", "warn");
        for kv in SMALL {
            cmd.args(["--set", kv]);
        }
        cmd.args(["--set", &format!("paths.data={}", self.path("data").display())]);
        cmd.args(args).output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.cfn(args);
        assert!(
            out.status.success(),
            "cfn {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn generate(&self) {
        self.ok(&["generate"]);
    }
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn metric_epochs(path: &Path) -> Vec<usize> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn generate_is_repeatable_and_described_by_a_manifest() {
    let a = Sandbox::new();
    let b = Sandbox::new();
    a.generate();
    b.generate();
    assert_eq!(tree(&a.path("data")), tree(&b.path("data")));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format"], "cfn-dataset");
    assert_eq!(manifest["splits"]["train"]["clips"], 6);
    assert_eq!(manifest["splits"]["val"]["clips"], 3);
    assert_eq!(read_split(&a.path("data/train"), 1).unwrap().len(), 6);
    assert_ne!(
        fs::read(a.path("data/train/annotations.jsonl")).unwrap(),
        fs::read(a.path("data/val/annotations.jsonl")).unwrap()
    );
}

#[test]
fn resumed_training_continues_epoch_numbering() {
    let s = Sandbox::new();
    s.generate();
    s.ok(&["train", "--out", "run", "--set", "train.epochs=2"]);
    assert_eq!(metric_epochs(&s.path("run/metrics.csv")), vec![1, 2]);
    s.ok(&["train", "--out", "run", "--set", "train.epochs=3", "--checkpoint", "run/checkpoint"]);
    assert_eq!(metric_epochs(&s.path("run/metrics.csv")), vec![1, 2, 3]);
    assert_eq!(load_checkpoint(&s.path("run/checkpoint")).unwrap().epoch, 3);
    let header = fs::read_to_string(s.path("run/metrics.csv")).unwrap();
    assert!(header.starts_with("schema,epoch,lr,train_loss,val_map\ncfn-metrics/1,1,"));
    assert!(fs::read_to_string(s.path("run/config.txt")).unwrap().contains("train.epochs = 3"));

    let out = s.cfn(&["train", "--out", "run", "--preset", "coarse-only", "--checkpoint", "run/checkpoint"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stride_preset_trains_without_a_confidence_head() {
    let s = Sandbox::new();
    s.generate();
    s.ok(&["train", "--preset", "table3d-stride", "--out", "run", "--set", "train.epochs=1"]);
    let ckpt = load_checkpoint(&s.path("run/checkpoint")).unwrap();
    assert!(ckpt.params.names().iter().all(|n| !n.contains("gridpool")));
    assert!(ckpt.params.names().iter().all(|n| !n.starts_with("fine.")));
    let csv = s.ok(&["inspect-grid", "--preset", "table3d-stride", "--checkpoint", "run/checkpoint", "--clip", "val00001"]);
    let s_values: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(5).unwrap().parse().unwrap()).collect();
    assert_eq!(s_values, vec![3.0, 7.0, 11.0, 15.0]);
}

#[test]
fn eval_reports_both_modes_and_matches_the_library() {
    let s = Sandbox::new();
    s.generate();
    s.ok(&["train", "--out", "run", "--set", "train.epochs=1"]);
    let stdout = s.ok(&["eval", "--out", "run", "--checkpoint", "run/checkpoint", "--mode", "all"]);
    let rows: Vec<&str> = stdout.lines().filter(|l| l.contains(",mAP,")).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("cfn-eval/1,all-frames,"));
    assert!(rows[1].starts_with("cfn-eval/1,sampled-25,"));

    let ckpt = load_checkpoint(&s.path("run/checkpoint")).unwrap();
    let model = Model::from_params(ckpt.network, ckpt.params).unwrap();
    let val = read_split(&s.path("data/val"), 1).unwrap();
    let reports = evaluate(&model, &val, &[EvalMode::AllFrames, EvalMode::Sampled25], 1).unwrap();
    for (row, report) in rows.iter().zip(&reports) {
        let printed: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!((printed - report.map).abs() < 5e-7, "{row} vs {}", report.map);
    }
    let saved = fs::read_to_string(s.path("run/eval.csv")).unwrap();
    assert!(saved.starts_with("schema,mode,class_id,ap\n"));
}

#[test]
fn input_problems_exit_with_code_two() {
    let s = Sandbox::new();
    let missing_ckpt = s.cfn(&["eval", "--checkpoint", "nowhere"]);
    assert_eq!(missing_ckpt.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing_ckpt.stderr).contains("no checkpoint"));

    let no_data = s.cfn(&["train", "--out", "run", "--set", "train.epochs=1"]);
    assert_eq!(no_data.status.code(), Some(2));

    for args in [
        &["train", "--set", "network.alpha=1/3"][..],
        &["train", "--set", "nonsense=1"],
        &["train", "--set", "novalue"],
        &["train", "--preset", "table9-x"],
        &["eval", "--checkpoint", "x", "--mode", "sometimes"],
    ] {
        assert_eq!(s.cfn(args).status.code(), Some(2), "{args:?}");
    }

    fs::write(s.path("bad.cfg"), "train.epochs = 2\ntrain.epochs = 3\n").unwrap();
    assert_eq!(s.cfn(&["train", "--config", "bad.cfg"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_three_and_leaves_a_dump() {
    let s = Sandbox::new();
    s.generate();
    let out = s.cfn(&["train", "--out", "run", "--set", "train.lr=1e8", "--set", "train.epochs=3"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gradcheck_prints_a_passing_table() {
    let s = Sandbox::new();
    let stdout = s.ok(&["gradcheck", "--seeds", "2"]);
    let mut lines = stdout.lines();
    assert_eq!(lines.next(), Some("schema,operator,seeds,max_rel_error,worst_seed,passed"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 9);
    assert!(rows.iter().all(|r| r.starts_with("cfn-gradcheck/1,") && r.ends_with(",true")), "{rows:?}");
}

#[test]
fn inspect_grid_on_a_fresh_model_is_uniform() {
    let s = Sandbox::new();
    s.generate();
    let csv = s.ok(&["inspect-grid", "--clip", "val00000", "--offset", "5"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("schema,clip_id,t,p_t,q_t,s_t,mu_t"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    for (t, row) in rows.iter().enumerate() {
        assert_eq!(row[0], "cfn-grid/1");
        assert_eq!(row[1], "val00000");
        let p: f64 = row[3].parse().unwrap();
        let s_t: f64 = row[5].parse().unwrap();
        let mu: f64 = row[6].parse().unwrap();
        assert!((p - 0.5).abs() < 1e-9);
        assert!((s_t - (4 * t + 3) as f64).abs() < 1e-9);
        assert!((mu - (s_t + 5.0)).abs() < 1e-9);
    }
    let missing = s.cfn(&["inspect-grid", "--clip", "val99999"]);
    assert_eq!(missing.status.code(), Some(2));
    let fine = s.cfn(&["inspect-grid", "--preset", "fine-only", "--clip", "val00000"]);
    assert_eq!(fine.status.code(), Some(2));
}

#[test]
fn two_stage_initialization_from_stream_checkpoints() {
    let s = Sandbox::new();
    s.generate();
    s.ok(&["train", "--preset", "coarse-only", "--out", "c", "--set", "train.epochs=1"]);
    s.ok(&["train", "--preset", "fine-only", "--out", "f", "--set", "train.epochs=1"]);
    let init = format!("paths.init={},{}", s.path("c/checkpoint").display(), s.path("f/checkpoint").display());
    s.ok(&["train", "--out", "cf", "--overfit", "0", "--set", &init]);
    s.ok(&["train", "--out", "fresh", "--overfit", "0"]);

    let coarse = load_checkpoint(&s.path("c/checkpoint")).unwrap().params;
    let fine = load_checkpoint(&s.path("f/checkpoint")).unwrap().params;
    let fresh = load_checkpoint(&s.path("fresh/checkpoint")).unwrap().params;
    let joint = load_checkpoint(&s.path("cf/checkpoint")).unwrap().params;
    for (name, t) in joint.iter() {
        let source = if name.starts_with("fusion.") {
            &fresh
        } else if name.starts_with("coarse.") {
            &coarse
        } else {
            &fine
        };
        assert_eq!(source.get(name), Some(t), "{name}");
    }
}
