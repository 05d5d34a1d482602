//! The two-stream detection network assembled from a [`NetworkConfig`].

use std::collections::BTreeSet;

use cfn_autograd::{ReduceKind, Tensor, Var, WindowKind};

use crate::error::{CfnError, Result};
use crate::fusion::{
    apply_site, coarse_centers, declare_lateral, declare_mask, lateral, prepare_level,
    Calibration, FusionSiteConfig, GaussianBank, ReduceMode,
};
use crate::gridpool::{fixed_pool, grid_pool, grid_unpool, sample_at, ConfidenceHeadConfig, FixedPool, Grid, GridMode, GridSpec};
use crate::params::{Bound, Init, ParamDecl, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Grid,
    /// Grid pooling with the confidence head output replaced by 0.5.
    GridUniform,
    Max,
    Avg,
    Stride,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionPreset {
    None,
    LateOnly,
    OneToOne,
    MultiStage,
    SlowFastDet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Streams {
    Both,
    CoarseOnly,
    FineOnly,
}

/// Where fusion Gaussians are centred.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CenterSource {
    Learned,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub streams: Streams,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Temporal downsampling factor of the coarse stream (`1 / alpha`).
    pub factor: usize,
    /// Coarse segment length `T` in training.
    pub coarse_frames: usize,
    /// Longest clip, after striding, the network accepts (`T'`).
    pub fine_frames: usize,
    pub input_stride: usize,
    pub pooling: Pooling,
    pub fusion: FusionPreset,
    pub reduce: ReduceMode,
    pub mask: bool,
    pub calibration: Calibration,
    pub centers: CenterSource,
    /// Overrides the Gaussian width `T' / 8` when set.
    pub sigma: Option<f64>,
    pub num_classes: usize,
    pub head_channels: usize,
    pub fc_channels: usize,
    pub confidence_hidden: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            streams: Streams::Both,
            in_channels: 8,
            channels: vec![8, 16, 32, 48],
            blocks: vec![1, 1, 1, 1],
            factor: 4,
            coarse_frames: 32,
            fine_frames: 64,
            input_stride: 1,
            pooling: Pooling::Grid,
            fusion: FusionPreset::MultiStage,
            reduce: ReduceMode::Cthw,
            mask: true,
            calibration: Calibration::Gaussian,
            centers: CenterSource::Learned,
            sigma: None,
            num_classes: 4,
            head_channels: 48,
            fc_channels: 32,
            confidence_hidden: 8,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn has_coarse(&self) -> bool {
        self.streams != Streams::FineOnly
    }

    pub fn has_fine(&self) -> bool {
        self.streams != Streams::CoarseOnly && (self.streams == Streams::FineOnly || self.fusion != FusionPreset::None)
    }

    /// Downsampling applied by the coarse stream's pooling layer.
    pub fn effective_factor(&self) -> usize {
        match (self.streams, self.pooling) {
            (Streams::FineOnly, _) | (_, Pooling::None) => 1,
            _ => self.factor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CfnError::Config(m));
        if self.channels.is_empty() || self.channels.len() != self.blocks.len() {
            return err(format!(
                "{} stage widths but {} block counts",
                self.channels.len(),
                self.blocks.len()
            ));
        }
        if self.channels.iter().chain(&self.blocks).any(|&v| v == 0) {
            return err("stage widths and block counts must be positive".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.head_channels == 0 || self.fc_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if self.input_stride == 0 {
            return err("input stride must be at least 1".into());
        }
        if self.factor == 0 {
            return err("alpha must be 1/k for a positive integer k".into());
        }
        let pooled = self.has_coarse() && self.pooling != Pooling::None;
        if pooled && self.factor < 2 {
            return err("temporal pooling needs alpha < 1".into());
        }
        if self.has_coarse() && !self.coarse_frames.is_multiple_of(self.effective_factor()) {
            return err(format!(
                "T = {} is not divisible by 1/alpha = {}; alpha * T must be an integer",
                self.coarse_frames, self.factor
            ));
        }
        if self.has_coarse() && self.coarse_frames < 2 {
            return err("T must be at least 2".into());
        }
        if self.coarse_frames > self.fine_frames {
            return err(format!(
                "coarse segment T = {} exceeds the clip cap T' = {}",
                self.coarse_frames, self.fine_frames
            ));
        }
        if matches!(self.pooling, Pooling::Grid | Pooling::GridUniform) && self.confidence_hidden == 0 {
            return err("confidence head needs hidden channels".into());
        }
        if self.streams == Streams::Both && self.fusion != FusionPreset::None && self.stages() < 2 {
            return err("fusion needs at least two stages".into());
        }
        if let Some(s) = self.sigma {
            if !(s > 0.0) {
                return err(format!("gaussian width {s} must be positive"));
            }
        }
        Ok(())
    }

    /// Fusion sites using the scale/shift path, in stage order.
    pub fn fusion_sites(&self) -> Vec<FusionSiteConfig> {
        if self.streams != Streams::Both {
            return Vec::new();
        }
        let n = self.stages();
        let level = |l: usize| (l, self.channels[l - 1]);
        let sites: Vec<(usize, Vec<usize>)> = match self.fusion {
            FusionPreset::None | FusionPreset::SlowFastDet => Vec::new(),
            FusionPreset::LateOnly => vec![(n, vec![n])],
            FusionPreset::OneToOne => (2..=n).map(|s| (s, vec![s])).collect(),
            FusionPreset::MultiStage => (2..=n).map(|s| (s, (2..=n).collect())).collect(),
        };
        sites
            .into_iter()
            .map(|(site, levels)| FusionSiteConfig {
                site,
                levels: levels.into_iter().map(level).collect(),
                reduce: self.reduce,
                mask: self.mask,
                channels: self.channels[site - 1],
            })
            .collect()
    }

    /// Stages receiving a depth-matched lateral connection.
    pub fn lateral_sites(&self) -> Vec<usize> {
        if self.streams == Streams::Both && self.fusion == FusionPreset::SlowFastDet {
            (2..=self.stages()).collect()
        } else {
            Vec::new()
        }
    }

    /// Fine stages whose output is consumed by fusion.
    pub fn fine_taps(&self) -> BTreeSet<usize> {
        let mut taps: BTreeSet<usize> = self
            .fusion_sites()
            .iter()
            .flat_map(|s| s.levels.iter().map(|&(l, _)| l))
            .collect();
        taps.extend(self.lateral_sites());
        taps
    }

    fn masked_levels(&self) -> BTreeSet<usize> {
        self.fusion_sites()
            .iter()
            .filter(|s| s.mask)
            .flat_map(|s| s.levels.iter().map(|&(l, _)| l))
            .collect()
    }

    pub fn head_stream(&self) -> &'static str {
        if self.streams == Streams::FineOnly {
            "fine"
        } else {
            "coarse"
        }
    }

    pub fn confidence_head(&self) -> Result<ConfidenceHeadConfig> {
        ConfidenceHeadConfig::for_factor(self.factor, self.confidence_hidden)
    }
}

pub fn is_fusion_param(name: &str) -> bool {
    name.starts_with("fusion.")
}

pub fn is_grid_param(name: &str) -> bool {
    name.starts_with("coarse.gridpool.")
}

fn conv_decls(out: &mut Vec<ParamDecl>, name: &str, c_out: usize, c_in: usize, k: Option<usize>) {
    let (shape, fan_in) = match k {
        Some(k) => (vec![c_out, c_in, k], c_in * k),
        None => (vec![c_out, c_in], c_in),
    };
    out.push(ParamDecl::new(format!("{name}.weight"), &shape, Init::Kaiming { fan_in }));
    out.push(ParamDecl::new(format!("{name}.bias"), &[c_out], Init::Zeros));
}

fn declare_stream(out: &mut Vec<ParamDecl>, cfg: &NetworkConfig, stream: &str) {
    let c0 = cfg.channels[0];
    conv_decls(out, &format!("{stream}.stem.spatial"), c0, cfg.in_channels, None);
    conv_decls(out, &format!("{stream}.stem.temporal"), c0, c0, Some(3));
    let mut c_in = c0;
    for (i, (&c, &blocks)) in cfg.channels.iter().zip(&cfg.blocks).enumerate() {
        for b in 0..blocks {
            let p = format!("{stream}.stage{}.block{b}", i + 1);
            conv_decls(out, &format!("{p}.a"), c, c_in, None);
            conv_decls(out, &format!("{p}.b"), c, c, Some(3));
            conv_decls(out, &format!("{p}.c"), c, c, None);
            if c_in != c {
                conv_decls(out, &format!("{p}.proj"), c, c_in, None);
            }
            c_in = c;
        }
    }
}

fn declare_head(out: &mut Vec<ParamDecl>, cfg: &NetworkConfig) {
    let p = format!("{}.head", cfg.head_stream());
    let last = *cfg.channels.last().expect("validated");
    conv_decls(out, &format!("{p}.conv5"), cfg.head_channels, last, None);
    conv_decls(out, &format!("{p}.fc1"), cfg.fc_channels, cfg.head_channels, None);
    conv_decls(out, &format!("{p}.fc2"), cfg.num_classes, cfg.fc_channels, None);
}

/// Every parameter the configuration needs, in a fixed order.
pub fn declare(cfg: &NetworkConfig) -> Result<Vec<ParamDecl>> {
    cfg.validate()?;
    let mut out = Vec::new();
    if cfg.has_coarse() {
        declare_stream(&mut out, cfg, "coarse");
        if cfg.pooling == Pooling::Grid {
            out.extend(cfg.confidence_head()?.declare("coarse.gridpool", cfg.channels[0]));
        }
    }
    if cfg.has_fine() {
        declare_stream(&mut out, cfg, "fine");
    }
    declare_head(&mut out, cfg);
    for level in cfg.masked_levels() {
        out.extend(declare_mask(level, cfg.channels[level - 1]));
    }
    for site in cfg.fusion_sites() {
        out.extend(site.declare());
    }
    for site in cfg.lateral_sites() {
        let c = cfg.channels[site - 1];
        out.extend(declare_lateral(site, c, c));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Coarse segment of `T` strided frames starting at `offset`.
    Train { offset: usize },
    /// Whole clip, fully convolutional.
    Eval,
}

pub struct Forward<'t> {
    /// `[K, T_out]` per-frame logits at annotation resolution.
    pub logits: Var<'t>,
    /// First annotation frame covered by `logits`.
    pub raw_start: usize,
    pub grid: Option<Grid<'t>>,
    /// Coarse slot positions on the fine timeline.
    pub centers: Vec<f64>,
}

impl Forward<'_> {
    pub fn grid_spec(&self) -> Option<&GridSpec> {
        self.grid.as_ref().map(|g| &g.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: ParamStore,
}

/// Every `stride`-th frame of `[C, T, ...]`.
pub fn stride_frames(x: &Tensor, stride: usize) -> Tensor {
    if stride == 1 {
        return x.clone();
    }
    let shape = x.shape();
    let (c, t) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let kept = t.div_ceil(stride);
    let mut data = Vec::with_capacity(c * kept * inner);
    for ci in 0..c {
        for k in 0..kept {
            let src = (ci * t + k * stride) * inner;
            data.extend_from_slice(&x.data()[src..src + inner]);
        }
    }
    let mut out = shape.to_vec();
    out[1] = kept;
    Tensor::new(out, data).expect("consistent shape")
}

/// Repeats the last frame until the length is a multiple of `multiple`.
pub fn pad_frames(x: &Tensor, multiple: usize) -> Tensor {
    let shape = x.shape();
    let (c, t) = (shape[0], shape[1]);
    let padded = t.div_ceil(multiple) * multiple;
    if padded == t {
        return x.clone();
    }
    let inner: usize = shape[2..].iter().product();
    let mut data = Vec::with_capacity(c * padded * inner);
    for ci in 0..c {
        let base = ci * t * inner;
        data.extend_from_slice(&x.data()[base..base + t * inner]);
        let last = &x.data()[base + (t - 1) * inner..base + t * inner];
        for _ in t..padded {
            data.extend_from_slice(last);
        }
    }
    let mut out = shape.to_vec();
    out[1] = padded;
    Tensor::new(out, data).expect("consistent shape")
}

fn spatial_halve<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let n = s.len();
    if n < 4 {
        return Ok(*x);
    }
    let fh = if s[n - 2] >= 2 && s[n - 2].is_multiple_of(2) { 2 } else { 1 };
    let fw = if s[n - 1] >= 2 && s[n - 1].is_multiple_of(2) { 2 } else { 1 };
    Ok(x.pool_spatial(fh, fw, WindowKind::Avg)?)
}

struct Ctx<'a, 't> {
    cfg: &'a NetworkConfig,
    params: &'a Bound<'t>,
}

impl<'t> Ctx<'_, 't> {
    fn pointwise(&self, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        Ok(x.conv_pointwise(&w, Some(&b))?)
    }

    fn temporal(&self, x: &Var<'t>, name: &str) -> Result<Var<'t>> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        Ok(x.conv_temporal(&w, Some(&b), 1, 1)?)
    }

    fn stem(&self, x: &Var<'t>, stream: &str) -> Result<Var<'t>> {
        let x = spatial_halve(x)?;
        let x = self.pointwise(&x, &format!("{stream}.stem.spatial"))?;
        Ok(self.temporal(&x, &format!("{stream}.stem.temporal"))?.relu())
    }

    fn stage(&self, x: &Var<'t>, stream: &str, stage: usize) -> Result<Var<'t>> {
        let tape = self.params.tape();
        tape.scoped(&format!("{stream}.stage{stage}"), || {
            let mut x = if stage > 1 { spatial_halve(x)? } else { *x };
            for b in 0..self.cfg.blocks[stage - 1] {
                let p = format!("{stream}.stage{stage}.block{b}");
                let h = self.pointwise(&x, &format!("{p}.a"))?.relu();
                let h = self.temporal(&h, &format!("{p}.b"))?.relu();
                let h = self.pointwise(&h, &format!("{p}.c"))?;
                let shortcut = if self.params.contains(&format!("{p}.proj.weight")) {
                    self.pointwise(&x, &format!("{p}.proj"))?
                } else {
                    x
                };
                x = shortcut.add(&h)?.relu();
            }
            Ok(x)
        })
    }

    fn head(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = self.params.tape();
        tape.scoped("head", || {
            let p = format!("{}.head", self.cfg.head_stream());
            let h = self.pointwise(x, &format!("{p}.conv5"))?.relu();
            let shape = h.shape();
            let spatial: Vec<usize> = (2..shape.len()).collect();
            let h = if spatial.is_empty() {
                h
            } else {
                h.reduce(&spatial, ReduceKind::Mean)?
            };
            let h = self.pointwise(&h, &format!("{p}.fc1"))?.relu();
            self.pointwise(&h, &format!("{p}.fc2"))
        })
    }
}

impl Model {
    pub fn build(config: NetworkConfig) -> Result<Self> {
        let decls = declare(&config)?;
        let params = ParamStore::initialize(&decls, config.seed)?;
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking they match the configuration.
    pub fn from_params(config: NetworkConfig, params: ParamStore) -> Result<Self> {
        let decls = declare(&config)?;
        let expected: Vec<&str> = decls.iter().map(|d| d.name.as_str()).collect();
        let got: Vec<&str> = params.names().iter().map(String::as_str).collect();
        if expected != got {
            return Err(CfnError::Invariant("parameter set does not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    /// Strided length of a clip with `raw_frames` annotation frames.
    pub fn strided_len(&self, raw_frames: usize) -> usize {
        raw_frames.div_ceil(self.config.input_stride)
    }

    /// Number of valid training offsets for a clip.
    pub fn train_offsets(&self, raw_frames: usize) -> usize {
        let l = self.strided_len(raw_frames);
        if self.config.streams == Streams::FineOnly {
            1
        } else {
            (l + 1).saturating_sub(self.config.coarse_frames)
        }
    }

    /// Runs the network on `features: [C, T_raw, H, W]`.
    pub fn forward<'t>(&self, params: &Bound<'t>, features: &Tensor, mode: Mode) -> Result<Forward<'t>> {
        let cfg = &self.config;
        let tape = params.tape();
        let ctx = Ctx { cfg, params };
        let shape = features.shape();
        if shape.len() < 2 || shape[0] != cfg.in_channels {
            return Err(CfnError::Data(format!(
                "clip features {:?} do not have {} input channels",
                shape, cfg.in_channels
            )));
        }
        let raw = shape[1];
        let stride = cfg.input_stride;
        let strided = stride_frames(features, stride);
        let len = strided.shape()[1];
        if len > cfg.fine_frames {
            return Err(CfnError::ClipTooLong {
                len,
                cap: cfg.fine_frames,
            });
        }

        let mode = if cfg.streams == Streams::FineOnly { Mode::Eval } else { mode };
        // Local timeline for the stream that produces logits.
        let (clip, seg_start, seg_len, padded) = match mode {
            Mode::Train { offset } => {
                if offset + cfg.coarse_frames > len {
                    return Err(CfnError::Data(format!(
                        "training segment {}..{} exceeds the {len}-frame clip",
                        offset,
                        offset + cfg.coarse_frames
                    )));
                }
                (strided, offset, cfg.coarse_frames, cfg.coarse_frames)
            }
            Mode::Eval => {
                let padded = pad_frames(&strided, cfg.effective_factor());
                let p = padded.shape()[1];
                (padded, 0, len, p)
            }
        };
        let fine_len = clip.shape()[1];
        let input = tape.constant(clip);

        let mut fine_levels: Vec<Option<Var<'t>>> = vec![None; cfg.stages() + 1];
        let fine_out = if cfg.has_fine() {
            tape.scoped("fine", || -> Result<Option<Var<'t>>> {
                let mut x = ctx.stem(&input, "fine")?;
                let taps = cfg.fine_taps();
                let last_needed = if cfg.streams == Streams::FineOnly {
                    cfg.stages()
                } else {
                    taps.iter().copied().max().unwrap_or(0)
                };
                for stage in 1..=last_needed {
                    x = ctx.stage(&x, "fine", stage)?;
                    if taps.contains(&stage) {
                        fine_levels[stage] = Some(x);
                    }
                }
                Ok((cfg.streams == Streams::FineOnly).then_some(x))
            })?
        } else {
            None
        };

        let (y, grid, centers) = if let Some(x) = fine_out {
            let spec = GridSpec::uniform(padded, 1)?;
            let centers = spec.s.clone();
            (ctx.head(&x)?, Grid::constant(tape, spec), centers)
        } else {
            self.coarse_forward(&ctx, &input, seg_start, padded, fine_len, &fine_levels)?
        };

        let logits = tape.scoped("unpool", || -> Result<Var<'t>> {
            let k = cfg.num_classes;
            let n = y.shape()[1];
            let y = y.reshape(&[k, n])?;
            let frames = grid_unpool(&y, &grid, padded)?;
            let raw_start = seg_start * stride;
            let raw_len = (seg_len * stride).min(raw - raw_start);
            let last = (seg_len - 1) as f64;
            let pos: Vec<f64> = (0..raw_len).map(|i| (i as f64 / stride as f64).min(last)).collect();
            sample_at(&frames, &pos)
        })?;
        let has_grid = cfg.has_coarse();
        Ok(Forward {
            logits,
            raw_start: seg_start * stride,
            grid: has_grid.then_some(grid),
            centers,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn coarse_forward<'t>(
        &self,
        ctx: &Ctx<'_, 't>,
        input: &Var<'t>,
        seg_start: usize,
        seg_frames: usize,
        fine_len: usize,
        fine_levels: &[Option<Var<'t>>],
    ) -> Result<(Var<'t>, Grid<'t>, Vec<f64>)> {
        let cfg = &self.config;
        let tape = ctx.params.tape();
        let seg = if seg_frames == input.shape()[1] {
            *input
        } else {
            input.narrow(1, seg_start, seg_frames)?
        };
        let x = tape.scoped("coarse", || ctx.stem(&seg, "coarse"))?;
        let x = ctx.stage(&x, "coarse", 1)?;
        let factor = cfg.effective_factor();
        let (mut x, grid) = tape.scoped("coarse.pool", || -> Result<(Var<'t>, Grid<'t>)> {
            Ok(match cfg.pooling {
                Pooling::Grid | Pooling::GridUniform => {
                    let mode = if cfg.pooling == Pooling::Grid {
                        GridMode::Learned
                    } else {
                        GridMode::ForcedUniform
                    };
                    grid_pool(&x, &cfg.confidence_head()?, ctx.params, "coarse.gridpool", mode)?
                }
                Pooling::Stride => (
                    fixed_pool(&x, FixedPool::Stride, factor)?,
                    Grid::constant(tape, GridSpec::uniform(seg_frames, factor)?),
                ),
                Pooling::Max | Pooling::Avg => {
                    let kind = if cfg.pooling == Pooling::Max {
                        FixedPool::Max
                    } else {
                        FixedPool::Avg
                    };
                    (
                        fixed_pool(&x, kind, factor)?,
                        Grid::constant(tape, GridSpec::window_centers(seg_frames, factor)?),
                    )
                }
                Pooling::None => (x, Grid::constant(tape, GridSpec::uniform(seg_frames, 1)?)),
            })
        })?;

        let span = (seg_start as f64, (seg_start + seg_frames - 1) as f64);
        let center_spec = match cfg.centers {
            CenterSource::Learned => grid.spec.clone(),
            CenterSource::Uniform => GridSpec::uniform(seg_frames, factor)?,
        };
        let centers = coarse_centers(&center_spec, span)?;
        let sites = cfg.fusion_sites();
        let laterals = cfg.lateral_sites();
        let bank = if sites.iter().any(|s| s.reduce == ReduceMode::Cthw) {
            let sigma = cfg.sigma.unwrap_or(fine_len as f64 / 8.0);
            Some(GaussianBank::new(centers.clone(), fine_len, sigma)?)
        } else {
            None
        };
        let mut prepared: Vec<Option<Var<'t>>> = vec![None; cfg.stages() + 1];

        for stage in 2..=cfg.stages() {
            x = ctx.stage(&x, "coarse", stage)?;
            if let Some(site) = sites.iter().find(|s| s.site == stage) {
                x = tape.scoped(&format!("fusion.site{stage}"), || -> Result<Var<'t>> {
                    let mut levels = Vec::with_capacity(site.levels.len());
                    for &(l, _) in &site.levels {
                        if prepared[l].is_none() {
                            let raw = fine_levels[l]
                                .ok_or_else(|| CfnError::Invariant(format!("fine level {l} was not computed")))?;
                            prepared[l] = Some(prepare_level(
                                &raw,
                                l,
                                site,
                                cfg.calibration,
                                bank.as_ref(),
                                ctx.params,
                            )?);
                        }
                        levels.push(prepared[l].expect("just prepared"));
                    }
                    apply_site(&x, &levels, site, ctx.params)
                })?;
            }
            if laterals.contains(&stage) {
                x = tape.scoped(&format!("fusion.lateral{stage}"), || -> Result<Var<'t>> {
                    let raw = fine_levels[stage]
                        .ok_or_else(|| CfnError::Invariant(format!("fine level {stage} was not computed")))?;
                    lateral(&x, &raw, &centers, stage, ctx.params)
                })?;
            }
        }
        let y = ctx.head(&x)?;
        Ok((y, grid, centers))
    }
}
