//! Learnable temporal downsampling and its inverse.
//!
//! A confidence head scores every output slot, the normalized cumulative
//! sum of `1 - p` places `n` sampling locations over `T` input frames, and
//! frames are read at those locations by linear interpolation. Unpooling
//! inverts the same piecewise-linear map to put per-slot predictions back on
//! a uniform timeline.

use std::rc::Rc;

use cfn_autograd::{BackwardCtx, ReduceKind, Tensor, Var, WindowKind};

use crate::error::{CfnError, Result};
use crate::params::{Bound, Init, ParamDecl};

/// A temporal sampling plan: `p`, `q` and `s` all have one entry per output
/// slot.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    /// Frames at the layer input.
    pub frames: usize,
    /// Downsampling factor `1 / alpha`.
    pub factor: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub s: Vec<f64>,
}

impl GridSpec {
    /// Plain numeric evaluation of the grid for confidences `p`.
    pub fn from_confidences(p: &[f64], frames: usize) -> Result<Self> {
        let factor = check_layout(p.len(), frames)?;
        check_confidences(p)?;
        let mut cs = Vec::with_capacity(p.len());
        let mut acc = 0.0;
        for &pi in p {
            acc += 1.0 - pi;
            cs.push(acc);
        }
        let total = acc;
        let q: Vec<f64> = cs.iter().map(|c| c / total * frames as f64).collect();
        let s = q.iter().map(|v| (v - 1.0).max(0.0)).collect();
        Ok(Self {
            frames,
            factor,
            p: p.to_vec(),
            q,
            s,
        })
    }

    /// The grid produced by any constant confidence: the last frame of every
    /// window of `factor` frames.
    pub fn uniform(frames: usize, factor: usize) -> Result<Self> {
        if factor == 0 || !frames.is_multiple_of(factor) {
            return Err(CfnError::Config(format!(
                "{frames} frames cannot be split into windows of {factor}"
            )));
        }
        Self::from_confidences(&vec![0.5; frames / factor], frames)
    }

    /// Samples at the centre of every window, which is where windowed max
    /// and average pooling place their outputs.
    pub fn window_centers(frames: usize, factor: usize) -> Result<Self> {
        let mut spec = Self::uniform(frames, factor)?;
        let shift = (factor as f64 - 1.0) / 2.0;
        for (j, (q, s)) in spec.q.iter_mut().zip(spec.s.iter_mut()).enumerate() {
            *s = (j * factor) as f64 + shift;
            *q = *s + 1.0;
        }
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Distance between consecutive sampling locations.
    pub fn gaps(&self) -> Vec<f64> {
        self.s.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn check_layout(n: usize, frames: usize) -> Result<usize> {
    if n == 0 || frames == 0 || !frames.is_multiple_of(n) {
        return Err(CfnError::Config(format!(
            "{n} output slots do not evenly divide {frames} input frames"
        )));
    }
    Ok(frames / n)
}

fn check_confidences(p: &[f64]) -> Result<()> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v < 1.0)) {
        return Err(CfnError::Grid(format!(
            "confidence p[{i}] = {v} is outside (0, 1); the grid would not be strictly increasing"
        )));
    }
    Ok(())
}

/// A grid recorded on a tape. For fixed pools `p` is absent and `q`, `s`
/// are constants.
#[derive(Clone, Debug)]
pub struct Grid<'t> {
    pub p: Option<Var<'t>>,
    pub q: Var<'t>,
    pub s: Var<'t>,
    pub spec: GridSpec,
}

impl<'t> Grid<'t> {
    /// Records a fixed plan as constants.
    pub fn constant(tape: &'t cfn_autograd::Tape, spec: GridSpec) -> Self {
        Self {
            p: None,
            q: tape.constant(Tensor::vector(&spec.q)),
            s: tape.constant(Tensor::vector(&spec.s)),
            spec,
        }
    }
}

/// `q_t = T * cumsum(1 - p)_t / sum(1 - p)` and `s_t = max(q_t - 1, 0)`.
pub fn compute_grid<'t>(p: &Var<'t>, frames: usize) -> Result<Grid<'t>> {
    let pv = p.value();
    if pv.ndim() != 1 {
        return Err(CfnError::Grid(format!("confidences must be a vector, got shape {:?}", pv.shape())));
    }
    let n = pv.numel();
    let factor = check_layout(n, frames)?;
    check_confidences(pv.data())?;
    let cs = p.neg().shift(1.0).cumsum(0)?;
    let total = cs.narrow(0, n - 1, 1)?;
    let q = cs.div(&total)?.scale(frames as f64);
    let s = q.shift(-1.0).clamp_min(0.0);
    let spec = GridSpec {
        frames,
        factor,
        p: pv.data().to_vec(),
        q: q.value().data().to_vec(),
        s: s.value().data().to_vec(),
    };
    Ok(Grid {
        p: Some(*p),
        q,
        s,
        spec,
    })
}

/// Lower neighbour and interpolation weight for a position in `[0, len-1]`.
#[inline]
fn bracket(pos: f64, len: usize) -> (usize, usize, f64) {
    if len == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (pos.floor() as usize).min(len - 2);
    (i0, i0 + 1, pos - i0 as f64)
}

/// Reads `x[:, s_t]` by linear interpolation between the neighbouring
/// frames. `x` is `[C, T, ...]`, `s` is a vector of positions in `[0, T-1]`.
pub fn grid_sample<'t>(x: &Var<'t>, s: &Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let sv = s.value();
    let shape = xv.shape().to_vec();
    if shape.len() < 2 || sv.ndim() != 1 {
        return Err(CfnError::Grid(format!(
            "grid_sample expects [C, T, ...] and a position vector, got {:?} and {:?}",
            shape,
            sv.shape()
        )));
    }
    let (c, t) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let pos = sv.data();
    if let Some((i, v)) = pos.iter().enumerate().find(|(_, &v)| !(0.0..=(t - 1) as f64).contains(&v)) {
        return Err(CfnError::Grid(format!(
            "sampling position s[{i}] = {v} is outside [0, {}]",
            t - 1
        )));
    }
    let n = pos.len();
    let brackets: Rc<Vec<(usize, usize, f64)>> = Rc::new(pos.iter().map(|&p| bracket(p, t)).collect());
    let xd = xv.data();
    let mut out = vec![0.0; c * n * inner];
    for ci in 0..c {
        for (j, &(i0, i1, w)) in brackets.iter().enumerate() {
            let a = &xd[(ci * t + i0) * inner..(ci * t + i0 + 1) * inner];
            let b = &xd[(ci * t + i1) * inner..(ci * t + i1 + 1) * inner];
            let dst = &mut out[(ci * n + j) * inner..(ci * n + j + 1) * inner];
            for k in 0..inner {
                dst[k] = (1.0 - w) * a[k] + w * b[k];
            }
        }
    }
    let mut out_shape = shape;
    out_shape[1] = n;
    let out = Tensor::new(out_shape, out)?;
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let g = ctx.grad;
        let xd = ctx.inputs[0].data();
        let gx = ctx.needs[0].then(|| {
            let mut gx = vec![0.0; xd.len()];
            for ci in 0..c {
                for (j, &(i0, i1, w)) in brackets.iter().enumerate() {
                    for k in 0..inner {
                        let gv = g[(ci * n + j) * inner + k];
                        gx[(ci * t + i0) * inner + k] += (1.0 - w) * gv;
                        gx[(ci * t + i1) * inner + k] += w * gv;
                    }
                }
            }
            gx
        });
        let gs = ctx.needs[1].then(|| {
            let mut gs = vec![0.0; n];
            for ci in 0..c {
                for (j, &(i0, i1, _)) in brackets.iter().enumerate() {
                    for k in 0..inner {
                        let diff = xd[(ci * t + i1) * inner + k] - xd[(ci * t + i0) * inner + k];
                        gs[j] += g[(ci * n + j) * inner + k] * diff;
                    }
                }
            }
            gs
        });
        vec![gx, gs]
    });
    Ok(x.tape().record("grid_sample", &[*x, *s], out, backward))
}

/// Interpolates `x` at fixed positions along axis 1.
pub fn sample_at<'t>(x: &Var<'t>, positions: &[f64]) -> Result<Var<'t>> {
    let s = x.tape().constant(Tensor::vector(positions));
    grid_sample(x, &s)
}

/// Evaluates the inverse of the piecewise-linear map `j -> knots[j]` at each
/// target, clamped into `[0, n-1]`.
pub fn invert_grid<'t>(knots: &Var<'t>, targets: &[f64]) -> Result<Var<'t>> {
    let kv = knots.value();
    let k = kv.data();
    let n = k.len();
    if kv.ndim() != 1 || n == 0 {
        return Err(CfnError::Invariant(format!("grid knots must be a non-empty vector, got {:?}", kv.shape())));
    }
    if let Some(i) = k.windows(2).position(|w| w[1] <= w[0]) {
        return Err(CfnError::Invariant(format!(
            "grid map is not strictly increasing at {i}: {} then {}",
            k[i],
            k[i + 1]
        )));
    }
    // (segment, weight) per target; None when clamped to an end
    let segs: Vec<Option<(usize, f64)>> = targets
        .iter()
        .map(|&u| {
            if n == 1 || u <= k[0] || u >= k[n - 1] {
                return None;
            }
            let seg = k.partition_point(|&v| v <= u) - 1;
            Some((seg, (u - k[seg]) / (k[seg + 1] - k[seg])))
        })
        .collect();
    let values: Vec<f64> = targets
        .iter()
        .zip(&segs)
        .map(|(&u, seg)| match seg {
            Some((i, w)) => *i as f64 + w,
            None if n == 1 || u <= k[0] => 0.0,
            None => (n - 1) as f64,
        })
        .collect();
    let out = Tensor::vector(&values);
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let k = ctx.inputs[0].data();
        let mut gk = vec![0.0; k.len()];
        for (&g, seg) in ctx.grad.iter().zip(&segs) {
            if let Some((i, w)) = *seg {
                let delta = k[i + 1] - k[i];
                gk[i] += g * (w - 1.0) / delta;
                gk[i + 1] += g * -w / delta;
            }
        }
        vec![Some(gk)]
    });
    Ok(knots.tape().record("invert_grid", &[*knots], out, backward))
}

/// Positions of `t_out` evenly stretched frames over a `frames`-long axis.
pub fn stretch_positions(frames: usize, t_out: usize) -> Vec<f64> {
    (0..t_out)
        .map(|i| (i as f64 * frames as f64 / t_out as f64).min((frames - 1) as f64))
        .collect()
}

/// Puts per-slot predictions `y: [K, n]` back onto a uniform timeline of
/// `t_out` frames.
pub fn grid_unpool<'t>(y: &Var<'t>, grid: &Grid<'t>, t_out: usize) -> Result<Var<'t>> {
    let spec = &grid.spec;
    let shape = y.shape();
    if shape.len() < 2 || shape[1] != spec.len() {
        return Err(CfnError::Grid(format!(
            "unpool input {:?} does not have {} slots",
            shape,
            spec.len()
        )));
    }
    if t_out < spec.frames {
        return Err(CfnError::Grid(format!(
            "unpool target length {t_out} is shorter than the grid's {} frames",
            spec.frames
        )));
    }
    let n = spec.len();
    let f = spec.factor as f64;
    let targets: Vec<f64> = (0..n).map(|j| (j + 1) as f64 * f - 1.0).collect();
    let knots = grid.q.shift(-1.0);
    let v = invert_grid(&knots, &targets)?;
    let realigned = grid_sample(y, &v)?;
    let last = (n - 1) as f64;
    let frame_pos: Vec<f64> = (0..spec.frames)
        .map(|fi| ((fi as f64 - targets[0]) / f).clamp(0.0, last))
        .collect();
    let frames = sample_at(&realigned, &frame_pos)?;
    if t_out == spec.frames {
        return Ok(frames);
    }
    sample_at(&frames, &stretch_positions(spec.frames, t_out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedPool {
    Max,
    Avg,
    Stride,
}

/// Non-overlapping temporal windows of `factor` frames.
pub fn fixed_pool<'t>(x: &Var<'t>, kind: FixedPool, factor: usize) -> Result<Var<'t>> {
    let window = match kind {
        FixedPool::Max => WindowKind::Max,
        FixedPool::Avg => WindowKind::Avg,
        FixedPool::Stride => WindowKind::Last,
    };
    Ok(x.pool_temporal(factor, window)?)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfidenceHeadConfig {
    pub kernel: usize,
    pub strides: Vec<usize>,
    pub hidden: usize,
}

impl ConfidenceHeadConfig {
    /// Three temporal convolutions whose strides multiply to `factor`.
    pub fn for_factor(factor: usize, hidden: usize) -> Result<Self> {
        if factor == 0 {
            return Err(CfnError::Config("downsampling factor must be positive".into()));
        }
        Ok(Self {
            kernel: 3,
            strides: split_stride(factor),
            hidden,
        })
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn declare(&self, prefix: &str, in_channels: usize) -> Vec<ParamDecl> {
        let mut out = Vec::new();
        let last = self.strides.len() - 1;
        let mut c_in = in_channels;
        for i in 0..self.strides.len() {
            let c_out = if i == last { 1 } else { self.hidden };
            let init = if i == last {
                Init::Zeros
            } else {
                Init::Kaiming {
                    fan_in: c_in * self.kernel,
                }
            };
            out.push(ParamDecl::new(format!("{prefix}.conv{i}.weight"), &[c_out, c_in, self.kernel], init));
            out.push(ParamDecl::new(format!("{prefix}.conv{i}.bias"), &[c_out], Init::Zeros));
            c_in = c_out;
        }
        out
    }
}

/// Splits `factor` into three integer strides, largest first.
pub fn split_stride(factor: usize) -> Vec<usize> {
    let mut primes = Vec::new();
    let mut rest = factor;
    let mut d = 2;
    while d * d <= rest {
        while rest.is_multiple_of(d) {
            primes.push(d);
            rest /= d;
        }
        d += 1;
    }
    if rest > 1 {
        primes.push(rest);
    }
    primes.sort_unstable_by(|a, b| b.cmp(a));
    let mut bins = [1usize; 3];
    for p in primes {
        let smallest = (0..3).min_by_key(|&i| (bins[i], i)).expect("three bins");
        bins[smallest] *= p;
    }
    bins.sort_unstable_by(|a, b| b.cmp(a));
    bins.to_vec()
}

/// Per-slot confidences `p = sigmoid(mean_hw(h(x)))` for `x: [C, T, H, W]`.
pub fn confidence_head<'t>(
    x: &Var<'t>,
    cfg: &ConfidenceHeadConfig,
    params: &Bound<'t>,
    prefix: &str,
) -> Result<Var<'t>> {
    let t = x.shape()[1];
    let total = cfg.total_stride();
    if !t.is_multiple_of(total) {
        return Err(CfnError::Config(format!(
            "{t} frames are not divisible by the confidence head's stride {total}"
        )));
    }
    let last = cfg.strides.len() - 1;
    let mut h = *x;
    for (i, &stride) in cfg.strides.iter().enumerate() {
        let w = params.get(&format!("{prefix}.conv{i}.weight"))?;
        let b = params.get(&format!("{prefix}.conv{i}.bias"))?;
        h = h.conv_temporal(&w, Some(&b), stride, cfg.kernel / 2)?;
        if i != last {
            h = h.relu();
        }
    }
    let shape = h.shape();
    let spatial: Vec<usize> = (2..shape.len()).collect();
    let pooled = if spatial.is_empty() {
        h
    } else {
        h.reduce(&spatial, ReduceKind::Mean)?
    };
    Ok(pooled.reshape(&[t / total])?.sigmoid())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMode {
    Learned,
    /// Replaces the head output with the constant 0.5.
    ForcedUniform,
}

/// Confidence head, grid construction and sampling.
pub fn grid_pool<'t>(
    x: &Var<'t>,
    cfg: &ConfidenceHeadConfig,
    params: &Bound<'t>,
    prefix: &str,
    mode: GridMode,
) -> Result<(Var<'t>, Grid<'t>)> {
    let t = x.shape()[1];
    let p = match mode {
        GridMode::Learned => confidence_head(x, cfg, params, prefix)?,
        GridMode::ForcedUniform => {
            if !t.is_multiple_of(cfg.total_stride()) {
                return Err(CfnError::Config(format!(
                    "{t} frames are not divisible by {}",
                    cfg.total_stride()
                )));
            }
            x.tape().constant(Tensor::full(&[t / cfg.total_stride()], 0.5))
        }
    };
    let grid = compute_grid(&p, t)?;
    let pooled = grid_sample(x, &grid.s)?;
    Ok((pooled, grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use cfn_autograd::Tape;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn uniform_confidences_give_even_grid() {
        let g = GridSpec::from_confidences(&[0.5; 4], 8).unwrap();
        assert_eq!(g.q, vec![2.0, 4.0, 6.0, 8.0]);
        assert_eq!(g.s, vec![1.0, 3.0, 5.0, 7.0]);
        for c in [0.01, 0.3, 0.99] {
            let g = GridSpec::from_confidences(&[c; 4], 8).unwrap();
            assert!(close(&g.q, &[2.0, 4.0, 6.0, 8.0], 1e-12));
        }
    }

    #[test]
    fn skewed_confidences() {
        let g = GridSpec::from_confidences(&[0.9, 0.1, 0.1, 0.1], 8).unwrap();
        assert!(close(&g.q, &[0.285714, 2.857143, 5.428571, 8.0], 1e-6));
        assert!(close(&g.s, &[0.0, 1.857143, 4.428571, 7.0], 1e-6));
    }

    #[test]
    fn confidences_outside_open_interval_rejected() {
        assert!(GridSpec::from_confidences(&[0.5, 1.0], 4).is_err());
        assert!(GridSpec::from_confidences(&[0.0, 0.5], 4).is_err());
        assert!(GridSpec::from_confidences(&[0.5, 0.5, 0.5], 4).is_err());
    }

    #[test]
    fn taped_grid_matches_numeric_grid() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::vector(&[0.9, 0.1, 0.1, 0.1]));
        let grid = compute_grid(&p, 8).unwrap();
        let plain = GridSpec::from_confidences(&[0.9, 0.1, 0.1, 0.1], 8).unwrap();
        assert_eq!(grid.spec, plain);
        assert_eq!(grid.q.value().data()[3], 8.0);
    }

    fn ramp(t: usize) -> Tensor {
        Tensor::from_fn(&[1, t, 1, 1], |i| i as f64)
    }

    #[test]
    fn sampling_a_ramp_returns_positions() {
        let tape = Tape::new();
        let x = tape.constant(ramp(8));
        let y = sample_at(&x, &[1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(y.value().data(), &[1.0, 3.0, 5.0, 7.0]);
        let s = [0.0, 1.857143, 4.428571, 7.0];
        let y = sample_at(&x, &s).unwrap();
        assert!(close(y.value().data(), &s, 1e-12));
        assert!(sample_at(&x, &[7.5]).is_err());
        assert!(sample_at(&x, &[-0.1]).is_err());
    }

    #[test]
    fn sampling_a_constant_is_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 6, 2, 2], 3.25));
        let y = sample_at(&x, &[0.0, 0.3, 2.7, 5.0]).unwrap();
        assert!(y.value().data().iter().all(|&v| (v - 3.25).abs() < 1e-15));
    }

    #[test]
    fn position_gradient_is_frame_difference() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 4], |i| (i * i) as f64));
        let s = tape.leaf(Tensor::vector(&[1.25, 2.5]));
        let y = grid_sample(&x, &s).unwrap();
        tape.backward(y.sum().unwrap()).unwrap();
        assert_eq!(s.grad().unwrap().data(), &[3.0, 5.0]);
    }

    #[test]
    fn unpool_uniform_example() {
        let tape = Tape::new();
        let grid = Grid::constant(&tape, GridSpec::uniform(8, 2).unwrap());
        let y = tape.constant(Tensor::new(vec![1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let out = grid_unpool(&y, &grid, 8).unwrap();
        assert_eq!(out.value().data(), &[0.0, 0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn unpool_constant_is_constant() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(&[0.2, 0.7, 0.4, 0.9]));
        let grid = compute_grid(&p, 16).unwrap();
        let y = tape.constant(Tensor::full(&[3, 4], -1.5));
        let out = grid_unpool(&y, &grid, 40).unwrap();
        assert_eq!(out.shape(), vec![3, 40]);
        assert!(out.value().data().iter().all(|&v| (v + 1.5).abs() < 1e-14));
    }

    #[test]
    fn inverse_rejects_non_increasing_knots() {
        let tape = Tape::new();
        let k = tape.constant(Tensor::vector(&[0.0, 2.0, 2.0]));
        assert!(matches!(invert_grid(&k, &[1.0]), Err(CfnError::Invariant(_))));
    }

    #[test]
    fn inverse_of_knots_is_index() {
        let tape = Tape::new();
        let knots = [-0.7, 1.2, 1.9, 6.0];
        let k = tape.constant(Tensor::vector(&knots));
        let v = invert_grid(&k, &knots).unwrap();
        assert!(close(v.value().data(), &[0.0, 1.0, 2.0, 3.0], 1e-12));
        let v = invert_grid(&k, &[-5.0, 0.25, 9.0]).unwrap();
        assert!(close(v.value().data(), &[0.0, 0.5, 3.0], 1e-12));
    }

    #[test]
    fn fixed_pools() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        assert_eq!(fixed_pool(&x, FixedPool::Avg, 2).unwrap().value().data(), &[2.0]);
        assert_eq!(fixed_pool(&x, FixedPool::Max, 2).unwrap().value().data(), &[3.0]);
        assert!(fixed_pool(&x, FixedPool::Stride, 3).is_err());
    }

    #[test]
    fn stride_pool_is_uniform_grid_sample() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[3, 12, 2, 1], |i| ((i * 37) % 17) as f64 - 8.0));
        let a = fixed_pool(&x, FixedPool::Stride, 4).unwrap().value();
        let grid = Grid::constant(&tape, GridSpec::uniform(12, 4).unwrap());
        let b = grid_sample(&x, &grid.s).unwrap().value();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stride_split() {
        assert_eq!(split_stride(4), vec![2, 2, 1]);
        assert_eq!(split_stride(8), vec![2, 2, 2]);
        assert_eq!(split_stride(16), vec![4, 2, 2]);
        assert_eq!(split_stride(1), vec![1, 1, 1]);
        assert_eq!(split_stride(7), vec![7, 1, 1]);
        for f in 1..100 {
            assert_eq!(split_stride(f).iter().product::<usize>(), f);
        }
    }

    #[test]
    fn head_output_length_and_initial_value() {
        let cfg = ConfidenceHeadConfig::for_factor(4, 4).unwrap();
        let store = ParamStore::initialize(&cfg.declare("h", 3), 0).unwrap();
        let tape = Tape::new();
        let params = Bound::new(&tape, &store, true);
        let x = tape.constant(Tensor::zeros(&[3, 64, 2, 2]));
        let p = confidence_head(&x, &cfg, &params, "h").unwrap();
        assert_eq!(p.shape(), vec![16]);
        assert!(p.value().data().iter().all(|&v| v == 0.5));
        let bad = tape.constant(Tensor::zeros(&[3, 30, 2, 2]));
        assert!(matches!(confidence_head(&bad, &cfg, &params, "h"), Err(CfnError::Config(_))));
    }

    #[test]
    fn window_centers_sit_mid_window() {
        let spec = GridSpec::window_centers(8, 4).unwrap();
        assert_eq!(spec.s, vec![1.5, 5.5]);
    }
}
