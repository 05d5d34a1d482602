//! Detection loss and per-frame average precision.

use cfn_autograd::{ReduceKind, Tape, Tensor, Var};
use rayon::prelude::*;

use crate::backbone::{Mode, Model};
use crate::dataio::DetectionClip;
use crate::error::{CfnError, Result};
use crate::params::Bound;

/// Binary per-frame, per-class activity labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameLabels {
    num_classes: usize,
    frames: usize,
    data: Vec<u8>,
}

impl FrameLabels {
    pub fn zeros(num_classes: usize, frames: usize) -> Self {
        Self {
            num_classes,
            frames,
            data: vec![0; num_classes * frames],
        }
    }

    /// Marks `[start, end)` of class `k` for every `(k, start, end)`.
    pub fn from_intervals(num_classes: usize, frames: usize, intervals: &[(usize, usize, usize)]) -> Result<Self> {
        let mut labels = Self::zeros(num_classes, frames);
        for &(k, start, end) in intervals {
            if k >= num_classes || start >= end || end > frames {
                return Err(CfnError::Data(format!(
                    "interval [{start}, {end}) of class {k} does not fit {num_classes} classes x {frames} frames"
                )));
            }
            for t in start..end {
                labels.data[k * frames + t] = 1;
            }
        }
        Ok(labels)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, class: usize, frame: usize) -> bool {
        self.data[class * self.frames + frame] != 0
    }

    pub fn row(&self, class: usize) -> &[u8] {
        &self.data[class * self.frames..(class + 1) * self.frames]
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Frames `start..start + len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(CfnError::Data(format!(
                "label window {start}..{} exceeds {} frames",
                start + len,
                self.frames
            )));
        }
        let mut out = Self::zeros(self.num_classes, len);
        for k in 0..self.num_classes {
            out.data[k * len..(k + 1) * len].copy_from_slice(&self.row(k)[start..start + len]);
        }
        Ok(out)
    }

    /// Maximal runs of positive frames as `(class, start, end)`.
    pub fn intervals(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for k in 0..self.num_classes {
            let row = self.row(k);
            let mut t = 0;
            while t < self.frames {
                if row[t] != 0 {
                    let start = t;
                    while t < self.frames && row[t] != 0 {
                        t += 1;
                    }
                    out.push((k, start, t));
                } else {
                    t += 1;
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[self.num_classes, self.frames], |i| self.data[i] as f64)
    }
}

/// `(localization + classification) / 2`, both binary cross-entropy on
/// logits. The clip-level logit is the temporal mean.
pub fn detection_loss<'t>(logits: &Var<'t>, labels: &FrameLabels) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape != [labels.num_classes, labels.frames] {
        return Err(CfnError::Tensor(cfn_autograd::TensorError::ShapeMismatch {
            op: "detection_loss",
            lhs: shape,
            rhs: vec![labels.num_classes, labels.frames],
        }));
    }
    let tape = logits.tape();
    let y = tape.constant(labels.to_tensor());
    let loc = logits.softplus().sub(&y.mul(logits)?)?.mean()?;
    let clip_labels: Vec<f64> = (0..labels.num_classes)
        .map(|k| if labels.row(k).iter().any(|&v| v != 0) { 1.0 } else { 0.0 })
        .collect();
    let yc = tape.constant(Tensor::vector(&clip_labels));
    let zc = logits.reduce(&[1], ReduceKind::Mean)?;
    let cls = zc.softplus().sub(&yc.mul(&zc)?)?.mean()?;
    Ok(loc.add(&cls)?.scale(0.5))
}

/// Mean precision at the rank of each positive, ranking by descending score
/// with ties kept in input order. `None` when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    AllFrames,
    Sampled25,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::AllFrames => "all-frames",
            EvalMode::Sampled25 => "sampled-25",
        }
    }
}

/// `floor(linspace(0, frames - 1, count))`.
pub fn sampled_frames(frames: usize, count: usize) -> Vec<usize> {
    if count == 1 || frames <= 1 {
        return vec![0; count];
    }
    let last = (frames - 1) as f64;
    (0..count)
        .map(|i| (i as f64 * last / (count - 1) as f64).floor() as usize)
        .collect()
}

pub const EVAL_SCHEMA: &str = "cfn-eval/1";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    /// `None` for classes without positive frames.
    pub per_class_ap: Vec<Option<f64>>,
    /// Mean over scored classes; NaN when no class has positives.
    pub map: f64,
    pub frames: usize,
    pub clips: usize,
}

impl EvalReport {
    /// Scores per-frame predictions `[K, T]` against their labels.
    pub fn from_scores(mode: EvalMode, predictions: &[(Tensor, &FrameLabels)]) -> Result<Self> {
        let k = predictions.first().map(|(_, l)| l.num_classes).unwrap_or(0);
        let mut scores: Vec<Vec<f64>> = vec![Vec::new(); k];
        let mut labels: Vec<Vec<bool>> = vec![Vec::new(); k];
        let mut frames = 0;
        for (pred, lab) in predictions {
            if pred.shape() != [lab.num_classes, lab.frames] || lab.num_classes != k {
                return Err(CfnError::Data(format!(
                    "prediction {:?} does not match labels [{}, {}]",
                    pred.shape(),
                    lab.num_classes,
                    lab.frames
                )));
            }
            let idx: Vec<usize> = match mode {
                EvalMode::AllFrames => (0..lab.frames).collect(),
                EvalMode::Sampled25 => sampled_frames(lab.frames, 25),
            };
            frames += idx.len();
            for c in 0..k {
                for &t in &idx {
                    scores[c].push(pred.at(&[c, t]));
                    labels[c].push(lab.get(c, t));
                }
            }
        }
        let per_class_ap: Vec<Option<f64>> = (0..k).map(|c| average_precision(&scores[c], &labels[c])).collect();
        let scored: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
        let map = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok(Self {
            mode,
            per_class_ap,
            map,
            frames,
            clips: predictions.len(),
        })
    }

    /// Class-weighted mean over scored classes.
    pub fn weighted_map(&self, weights: &[f64]) -> Result<f64> {
        if weights.len() != self.per_class_ap.len() {
            return Err(CfnError::Data(format!(
                "{} class weights for {} classes",
                weights.len(),
                self.per_class_ap.len()
            )));
        }
        let (num, den) = self
            .per_class_ap
            .iter()
            .zip(weights)
            .filter_map(|(ap, &w)| ap.map(|a| (a * w, w)))
            .fold((0.0, 0.0), |(n, d), (a, w)| (n + a, d + w));
        Ok(num / den)
    }

    pub fn csv_header() -> &'static str {
        "schema,mode,class_id,ap"
    }

    /// One row per class plus a closing `mAP` row.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let mode = self.mode.name();
        for (k, ap) in self.per_class_ap.iter().enumerate() {
            let v = ap.map(|a| format!("{a:.6}")).unwrap_or_else(|| "absent".into());
            out.push_str(&format!("{EVAL_SCHEMA},{mode},{k},{v}\n"));
        }
        out.push_str(&format!("{EVAL_SCHEMA},{mode},mAP,{:.6}\n", self.map));
        out
    }
}

/// Per-frame class probabilities `[K, T_raw]` for a whole clip.
pub fn predict(model: &Model, clip: &DetectionClip) -> Result<Tensor> {
    let tape = Tape::new();
    let params = Bound::new(&tape, &model.params, false);
    let out = model.forward(&params, &clip.features, Mode::Eval)?;
    Ok(out.logits.sigmoid().value().as_ref().clone())
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CfnError::Invariant(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Predicts every clip (in parallel when `threads > 1`) and scores them.
pub fn evaluate(model: &Model, clips: &[DetectionClip], modes: &[EvalMode], threads: usize) -> Result<Vec<EvalReport>> {
    if clips.is_empty() {
        return Err(CfnError::Data("evaluation set is empty".into()));
    }
    let preds: Vec<Tensor> = with_threads(threads, || {
        clips.par_iter().map(|c| predict(model, c)).collect::<Result<Vec<_>>>()
    })??;
    let pairs: Vec<(Tensor, &FrameLabels)> = preds.into_iter().zip(clips.iter().map(|c| &c.labels)).collect();
    modes.iter().map(|&m| EvalReport::from_scores(m, &pairs)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.2, 0.8], &[true, false, true]), Some(1.0));
        let ap = average_precision(&[0.9, 0.8, 0.2], &[false, true, true]).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.7, 0.3], &[true; 3]), Some(1.0));
        assert_eq!(average_precision(&[0.1, 0.7], &[false, false]), None);
    }

    #[test]
    fn ties_keep_input_order() {
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]), Some(0.5));
    }

    #[test]
    fn loss_at_zero_logits() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[3, 5]));
        let labels = FrameLabels::from_intervals(3, 5, &[(0, 0, 5), (1, 0, 5), (2, 0, 5)]).unwrap();
        let loss = detection_loss(&z, &labels).unwrap();
        assert!((loss.value().item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let labels = FrameLabels::from_intervals(2, 6, &[(1, 0, 6)]).unwrap();
        let tape = Tape::new();
        let z = tape.constant(labels.to_tensor().map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
        let loss = detection_loss(&z, &labels).unwrap().value().item();
        assert!(loss < 1e-8, "{loss}");
    }

    #[test]
    fn partial_activity_needs_a_positive_mean_logit() {
        // frames 1..3 active: +-20 gives a clip logit of -20/3
        let labels = FrameLabels::from_intervals(1, 6, &[(0, 1, 3)]).unwrap();
        let tape = Tape::new();
        let z = tape.constant(labels.to_tensor().map(|v| if v > 0.5 { 20.0 } else { -20.0 }));
        let loss = detection_loss(&z, &labels).unwrap().value().item();
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let expected_cls = softplus(-20.0 / 3.0) + 20.0 / 3.0;
        assert!((loss - 0.5 * (expected_cls + softplus(-20.0))).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn loss_shape_mismatch() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(detection_loss(&z, &FrameLabels::zeros(2, 5)).is_err());
    }

    #[test]
    fn sampled_indices() {
        let idx = sampled_frames(300, 25);
        assert_eq!(idx.len(), 25);
        assert_eq!(idx[0], 0);
        assert_eq!(idx[24], 299);
        assert_eq!(idx[1], 12);
        assert_eq!(sampled_frames(10, 25).len(), 25);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let labels = FrameLabels::from_intervals(2, 40, &[(0, 3, 9), (1, 20, 22)]).unwrap();
        let perfect = labels.to_tensor().map(|v| if v > 0.5 { 20.0 } else { -20.0 });
        for mode in [EvalMode::AllFrames, EvalMode::Sampled25] {
            let r = EvalReport::from_scores(mode, &[(perfect.clone(), &labels), (perfect.clone(), &labels)]).unwrap();
            assert_eq!(r.map, 1.0, "{mode:?}");
        }
        let r = EvalReport::from_scores(EvalMode::Sampled25, &[(perfect.clone(), &labels), (perfect, &labels)]).unwrap();
        assert_eq!(r.frames, 50);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let labels = FrameLabels::from_intervals(3, 4, &[(1, 0, 2)]).unwrap();
        let r = EvalReport::from_scores(EvalMode::AllFrames, &[(Tensor::zeros(&[3, 4]), &labels)]).unwrap();
        assert_eq!(r.per_class_ap[0], None);
        assert_eq!(r.per_class_ap[2], None);
        assert_eq!(r.map, r.per_class_ap[1].unwrap());
        assert!(r.csv_rows().contains(",0,absent\n"));
        assert!((r.weighted_map(&[5.0, 1.0, 9.0]).unwrap() - r.map).abs() < 1e-15);
    }

    #[test]
    fn label_intervals_round_trip() {
        let iv = vec![(0, 2, 5), (0, 7, 8), (1, 0, 10)];
        let labels = FrameLabels::from_intervals(2, 10, &iv).unwrap();
        assert_eq!(labels.intervals(), iv);
        assert_eq!(labels.positives(), 14);
        assert!(FrameLabels::from_intervals(2, 10, &[(2, 0, 1)]).is_err());
        assert!(FrameLabels::from_intervals(2, 10, &[(0, 5, 5)]).is_err());
        assert_eq!(labels.slice(4, 4).unwrap().intervals(), vec![(0, 0, 1), (0, 3, 4), (1, 0, 4)]);
    }
}
