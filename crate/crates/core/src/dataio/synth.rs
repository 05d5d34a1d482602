//! Bursty synthetic clips.
//!
//! Every clip is low-amplitude noise with a few short bursts. A burst of
//! class `k` is a sinusoid at the class frequency, spread over channels
//! with a fixed class-specific sign pattern. Frames outside bursts carry no
//! class information.

use std::f64::consts::TAU;

use cfn_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::DetectionClip;
use crate::error::{CfnError, Result};
use crate::losseval::FrameLabels;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSpec {
    pub num_clips: usize,
    pub num_classes: usize,
    /// Annotated frames per clip.
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub bursts_min: usize,
    pub bursts_max: usize,
    pub burst_len_min: usize,
    pub burst_len_max: usize,
    /// Frames of background between consecutive bursts.
    pub min_gap: usize,
    /// Carrier frequencies in cycles per frame, spread evenly over classes.
    pub freq_min: f64,
    pub freq_max: f64,
    pub amplitude: f64,
    pub noise: f64,
    pub stride: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clips: 96,
            num_classes: 4,
            frames: 64,
            channels: 8,
            height: 16,
            width: 16,
            bursts_min: 2,
            bursts_max: 4,
            burst_len_min: 4,
            burst_len_max: 8,
            min_gap: 4,
            freq_min: 0.2,
            freq_max: 0.45,
            amplitude: 1.0,
            noise: 0.3,
            stride: 1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CfnError::Config(m));
        if self.num_clips == 0 || self.num_classes == 0 || self.frames == 0 || self.channels == 0 {
            return err("clip, class, frame and channel counts must be positive".into());
        }
        if self.height == 0 || self.width == 0 || self.stride == 0 {
            return err("spatial size and stride must be positive".into());
        }
        if self.bursts_min > self.bursts_max {
            return err(format!("burst count range {}..={} is empty", self.bursts_min, self.bursts_max));
        }
        if self.burst_len_min == 0 || self.burst_len_min > self.burst_len_max {
            return err(format!(
                "burst length range {}..={} is empty",
                self.burst_len_min, self.burst_len_max
            ));
        }
        let worst = self.bursts_max * self.burst_len_max + self.bursts_max.saturating_sub(1) * self.min_gap;
        if worst > self.frames {
            return err(format!(
                "{} bursts of up to {} frames with gaps of {} need {worst} frames but clips have {}",
                self.bursts_max, self.burst_len_max, self.min_gap, self.frames
            ));
        }
        if !(self.freq_min > 0.0 && self.freq_min <= self.freq_max && self.freq_max <= 0.5) {
            return err(format!(
                "carrier frequencies [{}, {}] must lie in (0, 0.5]",
                self.freq_min, self.freq_max
            ));
        }
        if !(self.noise >= 0.0 && self.amplitude.is_finite() && self.noise.is_finite()) {
            return err("noise and amplitude must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn class_frequency(&self, class: usize) -> f64 {
        if self.num_classes == 1 {
            return self.freq_min;
        }
        self.freq_min + (self.freq_max - self.freq_min) * class as f64 / (self.num_classes - 1) as f64
    }

    /// Unit-norm sign pattern over channels; fixed per class so every split
    /// shares it.
    pub fn class_pattern(&self, class: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_c1a5 + class as u64);
        let scale = 1.0 / (self.channels as f64).sqrt();
        (0..self.channels)
            .map(|_| if rng.random::<bool>() { scale } else { -scale })
            .collect()
    }
}

/// Burst placement for one clip: `(class, start, end)` with `end` exclusive.
fn place_bursts(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<(usize, usize, usize)> {
    let n = rng.random_range(spec.bursts_min..=spec.bursts_max);
    if n == 0 {
        return Vec::new();
    }
    let lens: Vec<usize> = (0..n)
        .map(|_| rng.random_range(spec.burst_len_min..=spec.burst_len_max))
        .collect();
    let used: usize = lens.iter().sum::<usize>() + (n - 1) * spec.min_gap;
    let slack = spec.frames - used;
    let weights: Vec<f64> = (0..=n).map(|_| rng.random::<f64>() + 1e-9).collect();
    let total: f64 = weights.iter().sum();
    let mut extra: Vec<usize> = weights
        .iter()
        .map(|w| (w / total * slack as f64).floor() as usize)
        .collect();
    let given: usize = extra.iter().sum();
    extra[n] += slack - given;
    let mut out = Vec::with_capacity(n);
    let mut t = extra[0];
    for (i, &len) in lens.iter().enumerate() {
        let class = rng.random_range(0..spec.num_classes);
        out.push((class, t, t + len));
        t += len + spec.min_gap + extra[i + 1];
    }
    out
}

fn generate_clip(spec: &SynthSpec, index: usize, prefix: &str) -> Result<DetectionClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let bursts = place_bursts(spec, &mut rng);
    let (c, t, h, w) = (spec.channels, spec.frames, spec.height, spec.width);
    let hw = h * w;
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid noise level");
    let mut data: Vec<f64> = (0..c * t * hw)
        .map(|_| if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 })
        .collect();
    for &(class, start, end) in &bursts {
        let pattern = spec.class_pattern(class);
        let freq = spec.class_frequency(class);
        let phase = rng.random::<f64>() * TAU;
        for ti in start..end {
            let carrier = spec.amplitude * (TAU * freq * (ti - start) as f64 + phase).sin();
            for (ci, &sign) in pattern.iter().enumerate() {
                let base = (ci * t + ti) * hw;
                data[base..base + hw].iter_mut().for_each(|v| *v += sign * carrier);
            }
        }
    }
    let features = Tensor::new(vec![c, t, h, w], data)?;
    let labels = FrameLabels::from_intervals(spec.num_classes, t, &bursts)?;
    Ok(DetectionClip {
        clip_id: format!("{prefix}{index:05}"),
        features,
        labels,
        stride: spec.stride,
    })
}

/// Generates `spec.num_clips` clips named `{prefix}00000`, `{prefix}00001`, ...
/// Clip `i` depends only on `(seed, i)`.
pub fn generate(spec: &SynthSpec, prefix: &str) -> Result<Vec<DetectionClip>> {
    spec.validate()?;
    (0..spec.num_clips)
        .into_par_iter()
        .map(|i| generate_clip(spec, i, prefix))
        .collect()
}
