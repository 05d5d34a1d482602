//! The subcommands as library functions; `run` adds argument handling and
//! exit codes on top.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use cfn_autograd::Tape;
use cfn_core::backbone::{Mode, Model};
use cfn_core::config::RunConfig;
use cfn_core::dataio::checkpoint::MANIFEST;
use cfn_core::dataio::{generate, load_checkpoint, load_into, read_split, save_checkpoint, write_split, DetectionClip};
use cfn_core::gradcheck::{default_cases, run_suite, CaseReport, GradCase};
use cfn_core::losseval::{evaluate, EvalMode, EvalReport};
use cfn_core::params::Bound;
use cfn_core::train::{metrics_header, EpochRecord, Trainer};
use cfn_core::{CfnError, Result};
use serde_json::json;

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const OVERFIT_FILE: &str = "overfit.csv";
pub const GRID_SCHEMA: &str = "cfn-grid/1";
pub const OVERFIT_SCHEMA: &str = "cfn-overfit/1";

fn io(path: &Path, e: std::io::Error) -> CfnError {
    CfnError::io(path.display().to_string(), e)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io(path, e))
}

/// Appends `body` to a CSV, writing `header` first if the file is new or empty.
pub fn append_csv(path: &Path, header: &str, body: &str) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(header);
        text.push('\n');
    }
    text.push_str(body);
    f.write_all(text.as_bytes()).map_err(|e| io(path, e))
}

pub fn split_dir(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.data_dir.join(split)
}

pub fn load_split(cfg: &RunConfig, split: &str, stride: usize) -> Result<Vec<DetectionClip>> {
    read_split(&split_dir(cfg, split), stride)
}

/// Writes `train/` and `val/` under the data directory plus a manifest.
pub fn cmd_generate(cfg: &RunConfig) -> Result<(usize, usize)> {
    let train = generate(&cfg.data, "train")?;
    let val_spec = cfg.val_spec();
    let val = generate(&val_spec, "val")?;
    create_dir(&cfg.data_dir)?;
    write_split(&split_dir(cfg, "train"), &train)?;
    write_split(&split_dir(cfg, "val"), &val)?;
    let manifest = json!({
        "format": "cfn-dataset",
        "version": 1,
        "splits": {
            "train": { "clips": train.len(), "spec": cfg.data },
            "val": { "clips": val.len(), "spec": val_spec },
        },
    });
    let path = cfg.data_dir.join(DATASET_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CfnError::Data(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
    log::info!("wrote {} train and {} val clips to {}", train.len(), val.len(), cfg.data_dir.display());
    Ok((train.len(), val.len()))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    /// Loss before every step in overfit mode.
    pub overfit: Vec<f64>,
    pub checkpoint: PathBuf,
}

fn build_trainer(cfg: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    if let Some(dir) = resume {
        let ckpt = load_checkpoint(dir)?;
        let mut expected = cfg.network.clone();
        expected.seed = 0;
        if ckpt.network != expected {
            return Err(CfnError::Config(format!(
                "checkpoint {} was trained with a different network configuration",
                dir.display()
            )));
        }
        let model = Model::from_params(cfg.network.clone(), ckpt.params)?;
        let momentum = if ckpt.momentum.is_empty() {
            model.params.tensors().iter().map(|t| cfn_autograd::Tensor::zeros(t.shape())).collect()
        } else {
            ckpt.momentum
        };
        log::info!("resuming from {} after epoch {}", dir.display(), ckpt.epoch);
        return Trainer::resume(model, cfg.train.clone(), momentum, ckpt.epoch);
    }
    let mut model = Model::build(cfg.network.clone())?;
    for dir in &cfg.init {
        let ckpt = load_checkpoint(dir)?;
        let report = load_into(&mut model, &ckpt, true)?;
        log::info!(
            "initialized {} parameters from {} ({} kept, {} skipped)",
            report.loaded.len(),
            dir.display(),
            report.kept.len(),
            report.skipped.len()
        );
    }
    Trainer::new(model, cfg.train.clone())
}

/// Trains on `train/`, validating on `val/`. Writes the resolved config,
/// a metrics CSV and a checkpoint under the output directory. With
/// `overfit = Some(steps)` it repeats steps on the first batch instead.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, overfit: Option<usize>) -> Result<TrainOutcome> {
    create_dir(&cfg.out_dir)?;
    let resolved = cfg.to_kv();
    log::info!("resolved configuration:\n{resolved}");
    let config_path = cfg.out_dir.join("config.txt");
    fs::write(&config_path, &resolved).map_err(|e| io(&config_path, e))?;

    let stride = cfg.network.input_stride;
    let train = load_split(cfg, "train", stride)?;
    let mut trainer = build_trainer(cfg, resume)?;
    let ckpt_dir = cfg.out_dir.join(CHECKPOINT_DIR);
    let mut outcome = TrainOutcome {
        checkpoint: ckpt_dir.clone(),
        ..Default::default()
    };

    let result = if let Some(steps) = overfit {
        let n = cfg.train.batch_size.min(train.len());
        let batch: Vec<(&DetectionClip, Mode)> = train[..n].iter().map(|c| (c, Mode::Train { offset: 0 })).collect();
        trainer.overfit(&batch, steps).and_then(|losses| {
            let rows: String = losses
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{OVERFIT_SCHEMA},{i},{l:.8}\n"))
                .collect();
            append_csv(&cfg.out_dir.join(OVERFIT_FILE), "schema,step,loss", &rows)?;
            outcome.overfit = losses;
            save_checkpoint(&ckpt_dir, &trainer.model, trainer.epoch, &trainer.momentum)
        })
    } else {
        let val = load_split(cfg, "val", stride)?;
        let metrics = cfg.out_dir.join(METRICS_FILE);
        trainer
            .fit(&train, &val, |t, rec| {
                append_csv(&metrics, metrics_header(), &rec.csv_row())?;
                save_checkpoint(&ckpt_dir, &t.model, t.epoch, &t.momentum)
            })
            .map(|records| outcome.records = records)
    };
    if let Err(CfnError::NonFinite(msg)) = &result {
        let dump = cfg.out_dir.join("nonfinite.txt");
        fs::write(&dump, msg).map_err(|e| io(&dump, e))?;
    }
    result?;
    Ok(outcome)
}

/// Scores a checkpoint on a split, appending to `eval.csv`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, modes: &[EvalMode], split: &str) -> Result<Vec<EvalReport>> {
    if !checkpoint.join(MANIFEST).is_file() {
        return Err(CfnError::Data(format!("no checkpoint at {}", checkpoint.display())));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let model = Model::from_params(ckpt.network.clone(), ckpt.params)?;
    let clips = load_split(cfg, split, model.config.input_stride)?;
    let reports = evaluate(&model, &clips, modes, cfg.threads)?;
    create_dir(&cfg.out_dir)?;
    let body: String = reports.iter().map(EvalReport::csv_rows).collect();
    append_csv(&cfg.out_dir.join(EVAL_FILE), EvalReport::csv_header(), &body)?;
    for r in &reports {
        log::info!("{} mAP {:.4} over {} clips", r.mode.name(), r.map, r.clips);
    }
    Ok(reports)
}

pub fn cmd_gradcheck(seeds: usize, extra: Vec<Box<dyn GradCase>>) -> Result<Vec<CaseReport>> {
    let mut cases = default_cases();
    cases.extend(extra);
    run_suite(&cases, seeds)
}

/// CSV of the grid a model uses on one clip segment.
pub fn cmd_inspect_grid(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: &str,
    clip_id: &str,
    offset: usize,
) -> Result<String> {
    let model = match checkpoint {
        Some(dir) => {
            let ckpt = load_checkpoint(dir)?;
            Model::from_params(ckpt.network.clone(), ckpt.params)?
        }
        None => Model::build(cfg.network.clone())?,
    };
    let clips = load_split(cfg, split, model.config.input_stride)?;
    let clip = clips
        .iter()
        .find(|c| c.clip_id == clip_id)
        .ok_or_else(|| CfnError::Data(format!("no clip {clip_id:?} in the {split} split")))?;
    let tape = Tape::new();
    let params = Bound::new(&tape, &model.params, false);
    let out = model.forward(&params, &clip.features, Mode::Train { offset })?;
    let spec = out
        .grid_spec()
        .ok_or_else(|| CfnError::Config("this network has no coarse stream and therefore no grid".into()))?;
    let mut csv = String::from("schema,clip_id,t,p_t,q_t,s_t,mu_t\n");
    for t in 0..spec.len() {
        let mu = out.centers.get(t).copied().unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{GRID_SCHEMA},{clip_id},{t},{:.9},{:.9},{:.9},{:.9}\n",
            spec.p[t], spec.q[t], spec.s[t], mu
        ));
    }
    Ok(csv)
}
