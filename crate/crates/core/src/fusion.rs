//! Fine-to-coarse fusion: masking, temporal calibration, level
//! concatenation and the affine update of coarse features.

use cfn_autograd::{concat, ReduceKind, Tensor, Var, WindowKind};

use crate::error::{CfnError, Result};
use crate::gridpool::{sample_at, GridSpec};
use crate::params::{Bound, Init, ParamDecl};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    /// Channels only: time and space are averaged away.
    C,
    /// Channels and space: time is averaged away.
    Chw,
    /// Everything, with fine frames calibrated onto coarse slots.
    Cthw,
}

/// How fine frames are matched to coarse slots in `Cthw` mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Calibration {
    Gaussian,
    /// Reads the fine feature at the slot's centre by interpolation.
    Direct,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSiteConfig {
    /// Stage after which the site sits (1-based).
    pub site: usize,
    /// Fine stages feeding the site, with their channel counts.
    pub levels: Vec<(usize, usize)>,
    pub reduce: ReduceMode,
    pub mask: bool,
    /// Channels of the coarse feature being updated.
    pub channels: usize,
}

impl FusionSiteConfig {
    pub fn in_channels(&self) -> usize {
        self.levels.iter().map(|&(_, c)| c).sum()
    }

    pub fn prefix(&self) -> String {
        format!("fusion.site{}", self.site)
    }

    pub fn declare(&self) -> Vec<ParamDecl> {
        let p = self.prefix();
        let shape = [self.channels, self.in_channels()];
        vec![
            ParamDecl::new(format!("{p}.scale.weight"), &shape, Init::Zeros),
            ParamDecl::new(format!("{p}.scale.bias"), &[self.channels], Init::Zeros),
            ParamDecl::new(format!("{p}.shift.weight"), &shape, Init::Zeros),
            ParamDecl::new(format!("{p}.shift.bias"), &[self.channels], Init::Zeros),
        ]
    }
}

pub fn mask_prefix(level: usize) -> String {
    format!("fusion.mask{level}")
}

pub fn declare_mask(level: usize, channels: usize) -> Vec<ParamDecl> {
    let p = mask_prefix(level);
    vec![
        ParamDecl::new(format!("{p}.conv0.weight"), &[channels, channels], Init::Kaiming { fan_in: channels }),
        ParamDecl::new(format!("{p}.conv0.bias"), &[channels], Init::Zeros),
        ParamDecl::new(format!("{p}.conv1.weight"), &[channels, channels], Init::Zeros),
        ParamDecl::new(format!("{p}.conv1.bias"), &[channels], Init::Zeros),
    ]
}

/// Peak-normalized temporal Gaussians, one row per coarse slot.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBank {
    pub centers: Vec<f64>,
    pub sigma: f64,
    pub fine_len: usize,
    /// `[n, fine_len]`
    pub weights: Tensor,
    pub row_sums: Vec<f64>,
}

impl GaussianBank {
    pub fn new(centers: Vec<f64>, fine_len: usize, sigma: f64) -> Result<Self> {
        if centers.is_empty() || fine_len == 0 || !(sigma > 0.0) {
            return Err(CfnError::Config(format!(
                "gaussian bank needs centres, frames and a positive width (got {} centres, {fine_len} frames, sigma {sigma})",
                centers.len()
            )));
        }
        let n = centers.len();
        let weights = Tensor::from_fn(&[n, fine_len], |i| {
            let (j, t) = (i / fine_len, i % fine_len);
            let d = t as f64 - centers[j];
            (-d * d / (2.0 * sigma * sigma)).exp()
        });
        let row_sums = (0..n)
            .map(|j| weights.data()[j * fine_len..(j + 1) * fine_len].iter().sum())
            .collect();
        Ok(Self {
            centers,
            sigma,
            fine_len,
            weights,
            row_sums,
        })
    }

    pub fn weight(&self, j: usize, t: usize) -> f64 {
        self.weights.data()[j * self.fine_len + t]
    }

    /// Rows divided by their sums.
    pub fn normalized(&self) -> Tensor {
        let l = self.fine_len;
        Tensor::from_fn(self.weights.shape(), |i| self.weights.data()[i] / self.row_sums[i / l])
    }
}

/// Maps the grid's sampling indices affinely onto `span` of the fine timeline.
pub fn coarse_centers(spec: &GridSpec, span: (f64, f64)) -> Result<Vec<f64>> {
    let (start, end) = span;
    if !(end > start) || spec.frames < 2 {
        return Err(CfnError::Config(format!(
            "coarse span ({start}, {end}) over {} frames is degenerate",
            spec.frames
        )));
    }
    let scale = (end - start) / (spec.frames - 1) as f64;
    Ok(spec.s.iter().map(|s| start + s * scale).collect())
}

/// Gaussians of width `fine_len / 8` centred on the coarse samples.
pub fn build_gaussian_bank(spec: &GridSpec, fine_len: usize, span: (f64, f64)) -> Result<GaussianBank> {
    if span.0 < 0.0 || span.1 > (fine_len as f64 - 1.0) {
        return Err(CfnError::Config(format!(
            "coarse span ({}, {}) is outside the {fine_len}-frame fine timeline",
            span.0, span.1
        )));
    }
    GaussianBank::new(coarse_centers(spec, span)?, fine_len, fine_len as f64 / 8.0)
}

/// Gaussian-weighted average of fine frames for every coarse slot.
pub fn calibrate<'t>(x: &Var<'t>, bank: &GaussianBank) -> Result<Var<'t>> {
    let t = x.shape()[1];
    if t != bank.fine_len {
        return Err(CfnError::Config(format!(
            "feature has {t} frames but the bank was built for {}",
            bank.fine_len
        )));
    }
    Ok(x.mix_time(&bank.normalized())?)
}

/// `x * sigmoid(conv1(relu(conv0(x))))` with pointwise convolutions.
pub fn attention_mask<'t>(x: &Var<'t>, params: &Bound<'t>, prefix: &str) -> Result<Var<'t>> {
    let w0 = params.get(&format!("{prefix}.conv0.weight"))?;
    let b0 = params.get(&format!("{prefix}.conv0.bias"))?;
    let w1 = params.get(&format!("{prefix}.conv1.weight"))?;
    let b1 = params.get(&format!("{prefix}.conv1.bias"))?;
    let h = x.conv_pointwise(&w0, Some(&b0))?.relu();
    let m = h.conv_pointwise(&w1, Some(&b1))?.sigmoid();
    Ok(x.mul(&m)?)
}

fn spatial(shape: &[usize]) -> (usize, usize) {
    let n = shape.len();
    if n >= 4 {
        (shape[n - 2], shape[n - 1])
    } else {
        (1, 1)
    }
}

/// Max-pools every level to the smallest spatial size and concatenates
/// along channels.
pub fn multi_stage_concat<'t>(levels: &[Var<'t>]) -> Result<Var<'t>> {
    if levels.is_empty() {
        return Err(CfnError::Config("fusion site has no input levels".into()));
    }
    if levels.len() == 1 {
        return Ok(levels[0]);
    }
    let sizes: Vec<(usize, usize)> = levels.iter().map(|l| spatial(&l.shape())).collect();
    let h = sizes.iter().map(|s| s.0).min().expect("non-empty");
    let w = sizes.iter().map(|s| s.1).min().expect("non-empty");
    let mut pooled = Vec::with_capacity(levels.len());
    for (l, &(lh, lw)) in levels.iter().zip(&sizes) {
        if lh % h != 0 || lw % w != 0 {
            return Err(CfnError::Config(format!(
                "level of size {lh}x{lw} is not an integer multiple of {h}x{w}"
            )));
        }
        pooled.push(l.pool_spatial(lh / h, lw / w, WindowKind::Max)?);
    }
    Ok(concat(&pooled, 0)?)
}

/// Projects concatenated fine features to a scale `A` in (0, 1) and a
/// shift `B`. In `C` and `Chw` modes the missing axes are averaged first.
pub fn scale_shift<'t>(
    x: &Var<'t>,
    site: &FusionSiteConfig,
    params: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let shape = x.shape();
    if shape[0] != site.in_channels() {
        return Err(CfnError::Tensor(cfn_autograd::TensorError::ChannelMismatch {
            op: "scale_shift",
            expected: site.in_channels(),
            got: shape[0],
        }));
    }
    let axes: Vec<usize> = match site.reduce {
        ReduceMode::C => (1..shape.len()).collect(),
        ReduceMode::Chw => vec![1],
        ReduceMode::Cthw => Vec::new(),
    };
    let reduced = if axes.is_empty() {
        *x
    } else {
        x.reduce_keepdim(&axes, ReduceKind::Mean)?
    };
    let p = site.prefix();
    let a = reduced
        .conv_pointwise(
            &params.get(&format!("{p}.scale.weight"))?,
            Some(&params.get(&format!("{p}.scale.bias"))?),
        )?
        .sigmoid();
    let b = reduced.conv_pointwise(
        &params.get(&format!("{p}.shift.weight"))?,
        Some(&params.get(&format!("{p}.shift.bias"))?),
    )?;
    Ok((a, b))
}

/// Nearest-neighbour upsampling of `a` to the spatial size of `like`.
pub fn match_spatial<'t>(a: &Var<'t>, like: &[usize]) -> Result<Var<'t>> {
    let (ah, aw) = spatial(&a.shape());
    let (h, w) = spatial(like);
    if (ah, aw) == (h, w) || (ah, aw) == (1, 1) {
        return Ok(*a);
    }
    if h % ah != 0 || w % aw != 0 {
        return Err(CfnError::Config(format!("cannot expand {ah}x{aw} to {h}x{w}")));
    }
    Ok(a.upsample_spatial(h / ah, w / aw)?)
}

/// `a * x + b` with broadcasting.
pub fn fuse<'t>(x: &Var<'t>, a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    Ok(a.mul(x)?.add(b)?)
}

/// Brings a fine feature onto the coarse slots: optional mask, then
/// calibration when the site keeps the temporal axis. Direct calibration
/// only reads the bank's centres.
pub fn prepare_level<'t>(
    x_fine: &Var<'t>,
    level: usize,
    site: &FusionSiteConfig,
    calibration: Calibration,
    bank: Option<&GaussianBank>,
    params: &Bound<'t>,
) -> Result<Var<'t>> {
    let masked = if site.mask {
        attention_mask(x_fine, params, &mask_prefix(level))?
    } else {
        *x_fine
    };
    if site.reduce != ReduceMode::Cthw {
        return Ok(masked);
    }
    let bank = bank.ok_or_else(|| CfnError::Invariant("temporal fusion without coarse centres".into()))?;
    match calibration {
        Calibration::Gaussian => calibrate(&masked, bank),
        Calibration::Direct => sample_at(&masked, &bank.centers),
    }
}

/// One fusion site applied to the coarse feature `x`. `levels` holds the
/// prepared fine features in the order of `site.levels`.
pub fn apply_site<'t>(
    x: &Var<'t>,
    levels: &[Var<'t>],
    site: &FusionSiteConfig,
    params: &Bound<'t>,
) -> Result<Var<'t>> {
    let cat = multi_stage_concat(levels)?;
    let (a, b) = scale_shift(&cat, site, params)?;
    let shape = x.shape();
    let a = match_spatial(&a, &shape)?;
    let b = match_spatial(&b, &shape)?;
    fuse(x, &a, &b)
}

pub fn lateral_prefix(site: usize) -> String {
    format!("fusion.lateral{site}")
}

pub fn declare_lateral(site: usize, channels: usize, fine_channels: usize) -> Vec<ParamDecl> {
    let p = lateral_prefix(site);
    vec![
        ParamDecl::new(format!("{p}.weight"), &[channels, fine_channels], Init::Zeros),
        ParamDecl::new(format!("{p}.bias"), &[channels], Init::Zeros),
    ]
}

/// Depth-matched lateral connection: the fine feature read at the coarse
/// slot positions, projected, and added to the coarse feature.
pub fn lateral<'t>(
    x: &Var<'t>,
    x_fine: &Var<'t>,
    centers: &[f64],
    site: usize,
    params: &Bound<'t>,
) -> Result<Var<'t>> {
    let p = lateral_prefix(site);
    let picked = sample_at(x_fine, centers)?;
    let (fh, fw) = spatial(&picked.shape());
    let (ch, cw) = spatial(&x.shape());
    if fh % ch != 0 || fw % cw != 0 {
        return Err(CfnError::Config(format!("lateral input {fh}x{fw} does not reduce to {ch}x{cw}")));
    }
    let picked = picked.pool_spatial(fh / ch, fw / cw, WindowKind::Max)?;
    let proj = picked.conv_pointwise(&params.get(&format!("{p}.weight"))?, Some(&params.get(&format!("{p}.bias"))?))?;
    Ok(x.add(&proj)?)
}
