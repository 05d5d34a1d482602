//! SGD with momentum over per-clip tapes.

use cfn_autograd::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{is_fusion_param, is_grid_param, Mode, Model};
use crate::dataio::DetectionClip;
use crate::error::{CfnError, Result};
use crate::gridpool::GridSpec;
use crate::losseval::{detection_loss, evaluate, with_threads, EvalMode};
use crate::params::Bound;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<usize>,
    pub lr_gamma: f64,
    /// Learning-rate multiplier for fusion parameters.
    pub fusion_lr_mult: f64,
    /// Learning-rate multiplier for the grid pool confidence head.
    pub grid_lr_mult: f64,
    /// Rescales the batch gradient when its norm exceeds this value.
    pub grad_clip: Option<f64>,
    /// Validation interval in epochs; 0 evaluates only after the last epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 0.0,
            lr_steps: vec![60, 80],
            lr_gamma: 0.1,
            fusion_lr_mult: 10.0,
            grid_lr_mult: 1.0,
            grad_clip: None,
            eval_every: 1,
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CfnError::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CfnError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CfnError::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.threads == 0 {
            return Err(CfnError::Config("threads must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map: Option<f64>,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        metrics_row(self.epoch, self.lr, self.train_loss, self.val_map)
    }
}

pub const METRICS_SCHEMA: &str = "cfn-metrics/1";

pub fn metrics_header() -> &'static str {
    "schema,epoch,lr,train_loss,val_map"
}

pub fn metrics_row(epoch: usize, lr: f64, loss: f64, val_map: Option<f64>) -> String {
    let v = val_map.map(|m| format!("{m:.6}")).unwrap_or_default();
    format!("{METRICS_SCHEMA},{epoch},{lr:e},{loss:.8},{v}\n")
}

/// Gradient of one clip's loss.
pub struct ClipGrad {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub grid: Option<GridSpec>,
}

pub fn clip_gradient(model: &Model, clip: &DetectionClip, mode: Mode) -> Result<ClipGrad> {
    let tape = Tape::new();
    let params = Bound::new(&tape, &model.params, true);
    let out = model.forward(&params, &clip.features, mode)?;
    let frames = out.logits.shape()[1];
    let labels = clip.labels.slice(out.raw_start, frames)?;
    let loss = detection_loss(&out.logits, &labels)?;
    let value = loss.value().item();
    let grid = out.grid_spec().cloned();
    if !value.is_finite() {
        return Ok(ClipGrad {
            loss: value,
            grads: Vec::new(),
            grid,
        });
    }
    tape.backward(loss)?;
    Ok(ClipGrad {
        loss: value,
        grads: params.grads(),
        grid,
    })
}

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub momentum: Vec<Tensor>,
    /// Epochs completed so far.
    pub epoch: usize,
    pub steps: usize,
    lr_mult: Vec<f64>,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let momentum = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self::assemble(model, cfg, momentum, 0))
    }

    /// Continues from saved momentum buffers after `epoch` completed epochs.
    pub fn resume(model: Model, cfg: TrainConfig, momentum: Vec<Tensor>, epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let ok = momentum.len() == model.params.len()
            && momentum.iter().zip(model.params.tensors()).all(|(m, p)| m.shape() == p.shape());
        if !ok {
            return Err(CfnError::Invariant("optimizer state does not match the parameters".into()));
        }
        Ok(Self::assemble(model, cfg, momentum, epoch))
    }

    fn assemble(model: Model, cfg: TrainConfig, momentum: Vec<Tensor>, epoch: usize) -> Self {
        let lr_mult = model
            .params
            .names()
            .iter()
            .map(|n| {
                if is_fusion_param(n) {
                    cfg.fusion_lr_mult
                } else if is_grid_param(n) {
                    cfg.grid_lr_mult
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            model,
            cfg,
            momentum,
            epoch,
            steps: 0,
            lr_mult,
        }
    }

    /// One optimizer step on the mean loss of `batch`; returns that loss.
    pub fn step(&mut self, batch: &[(&DetectionClip, Mode)], lr: f64) -> Result<f64> {
        let model = &self.model;
        let results: Vec<ClipGrad> = with_threads(self.cfg.threads, || {
            batch
                .par_iter()
                .map(|(clip, mode)| clip_gradient(model, clip, *mode))
                .collect::<Result<Vec<_>>>()
        })??;
        let n = results.len() as f64;
        let mut total = vec![None::<Vec<f64>>; self.model.params.len()];
        let mut loss = 0.0;
        for (r, (clip, _)) in results.iter().zip(batch) {
            if !r.loss.is_finite() {
                let dump = r
                    .grid
                    .as_ref()
                    .map(|g| format!("p = {:?}\nq = {:?}\ns = {:?}", g.p, g.q, g.s))
                    .unwrap_or_else(|| "no grid".into());
                return Err(CfnError::NonFinite(format!(
                    "loss on clip {} is {} at step {}\n{dump}",
                    clip.clip_id, r.loss, self.steps
                )));
            }
            loss += r.loss;
            for (acc, g) in total.iter_mut().zip(&r.grads) {
                if let Some(g) = g {
                    match acc {
                        Some(a) => a.iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                        None => *acc = Some(g.data().to_vec()),
                    }
                }
            }
        }
        let mut scale = 1.0 / n;
        if let Some(limit) = self.cfg.grad_clip {
            let norm = total.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v * scale * scale).sum::<f64>().sqrt();
            if norm > limit {
                scale *= limit / norm;
            }
        }
        for (i, g) in total.into_iter().enumerate() {
            let rate = lr * self.lr_mult[i];
            let wd = self.cfg.weight_decay;
            let mu = self.cfg.momentum;
            let param = self.model.params.tensor_mut(i);
            let vel = self.momentum[i].data_mut();
            let pd = param.data_mut();
            for k in 0..pd.len() {
                let grad = g.as_ref().map_or(0.0, |g| g[k] * scale) + wd * pd[k];
                vel[k] = mu * vel[k] + grad;
                pd[k] -= rate * vel[k];
            }
        }
        self.steps += 1;
        let mean = loss / n;
        if !self.model.params.tensors().iter().all(Tensor::is_finite) {
            return Err(CfnError::NonFinite(format!("parameters became non-finite at step {}", self.steps)));
        }
        Ok(mean)
    }

    /// Shuffled pass over `clips` with random coarse segments. Returns the
    /// mean training loss.
    pub fn train_epoch(&mut self, clips: &[DetectionClip]) -> Result<f64> {
        if clips.is_empty() {
            return Err(CfnError::Data("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64);
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut rng);
        let plan: Vec<(&DetectionClip, Mode)> = order
            .iter()
            .map(|&i| {
                let clip = &clips[i];
                let offsets = self.model.train_offsets(clip.labels.frames());
                if offsets == 0 {
                    return Err(CfnError::Data(format!(
                        "clip {} is shorter than the coarse segment",
                        clip.clip_id
                    )));
                }
                let offset = rng.random_range(0..offsets);
                Ok((clip, Mode::Train { offset }))
            })
            .collect::<Result<_>>()?;
        let lr = self.cfg.lr_at(self.epoch);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in plan.chunks(self.cfg.batch_size) {
            sum += self.step(batch, lr)?;
            batches += 1;
        }
        self.epoch += 1;
        Ok(sum / batches as f64)
    }

    /// Trains until `cfg.epochs` epochs are complete, scoring `val` with
    /// all-frames mAP at the configured interval. `on_epoch` sees the
    /// trainer after every epoch (for checkpoints and metrics).
    pub fn fit(
        &mut self,
        train: &[DetectionClip],
        val: &[DetectionClip],
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.cfg.epochs {
            let lr = self.cfg.lr_at(self.epoch);
            let train_loss = self.train_epoch(train)?;
            let last = self.epoch == self.cfg.epochs;
            let due = self.cfg.eval_every > 0 && self.epoch.is_multiple_of(self.cfg.eval_every);
            let val_map = if !val.is_empty() && (due || last) {
                let reports = evaluate(&self.model, val, &[EvalMode::AllFrames], self.cfg.threads)?;
                Some(reports[0].map)
            } else {
                None
            };
            let record = EpochRecord {
                epoch: self.epoch,
                lr,
                train_loss,
                val_map,
            };
            log::info!(
                "epoch {} lr {:.2e} loss {:.5} val mAP {}",
                record.epoch,
                lr,
                train_loss,
                val_map.map_or("-".into(), |m| format!("{m:.4}"))
            );
            on_epoch(self, &record)?;
            records.push(record);
        }
        Ok(records)
    }

    /// Repeated steps on one fixed batch. Returns the loss before every step.
    pub fn overfit(&mut self, batch: &[(&DetectionClip, Mode)], steps: usize) -> Result<Vec<f64>> {
        let lr = self.cfg.lr;
        (0..steps).map(|_| self.step(batch, lr)).collect()
    }
}
