use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::tape::{BackwardCtx, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowKind {
    Max,
    Avg,
    /// Keeps the last element of each window.
    Last,
}

fn rank_at_least(op: &'static str, shape: &[usize], n: usize) -> Result<()> {
    if shape.len() < n {
        return Err(TensorError::invalid(op, format!("rank {} < {n}", shape.len())));
    }
    Ok(())
}

/// For every output element, the input elements it reads and their weights.
/// Used by the window ops whose backward is a scatter of those weights.
struct Gather {
    src: Vec<usize>,
    weight: Vec<f64>,
    /// `offsets[o]..offsets[o + 1]` indexes `src`/`weight` for output `o`.
    offsets: Vec<usize>,
}

fn record_gather<'t>(x: &Var<'t>, op: &'static str, out_shape: Vec<usize>, gather: Gather) -> Result<Var<'t>> {
    let xv = x.value();
    let xd = xv.data();
    let n_out = gather.offsets.len() - 1;
    let data: Vec<f64> = (0..n_out)
        .map(|o| {
            (gather.offsets[o]..gather.offsets[o + 1])
                .map(|k| gather.weight[k] * xd[gather.src[k]])
                .sum()
        })
        .collect();
    let out = Tensor::new(out_shape, data)?;
    let gather = Rc::new(gather);
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let mut gx = vec![0.0; ctx.inputs[0].numel()];
        for (o, &g) in ctx.grad.iter().enumerate() {
            for k in gather.offsets[o]..gather.offsets[o + 1] {
                gx[gather.src[k]] += gather.weight[k] * g;
            }
        }
        vec![Some(gx)]
    });
    Ok(x.tape().record(op, &[*x], out, backward))
}

impl<'t> Var<'t> {
    /// Non-overlapping windows of `factor` frames along axis 1.
    pub fn pool_temporal(&self, factor: usize, kind: WindowKind) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        rank_at_least("pool_temporal", &shape, 2)?;
        let t = shape[1];
        if factor == 0 || !t.is_multiple_of(factor) {
            return Err(TensorError::invalid(
                "pool_temporal",
                format!("length {t} is not divisible by {factor}"),
            ));
        }
        let outer = shape[0];
        let inner: usize = shape[2..].iter().product();
        let t_out = t / factor;
        let xd = xv.data();
        let mut g = Gather {
            src: Vec::new(),
            weight: Vec::new(),
            offsets: vec![0],
        };
        for c in 0..outer {
            for j in 0..t_out {
                for p in 0..inner {
                    let idx = |ti: usize| (c * t + ti) * inner + p;
                    match kind {
                        WindowKind::Avg => {
                            for ti in j * factor..(j + 1) * factor {
                                g.src.push(idx(ti));
                                g.weight.push(1.0 / factor as f64);
                            }
                        }
                        WindowKind::Max => {
                            let best = (j * factor..(j + 1) * factor)
                                .map(idx)
                                .reduce(|a, b| if xd[b] > xd[a] { b } else { a })
                                .expect("non-empty window");
                            g.src.push(best);
                            g.weight.push(1.0);
                        }
                        WindowKind::Last => {
                            g.src.push(idx((j + 1) * factor - 1));
                            g.weight.push(1.0);
                        }
                    }
                    g.offsets.push(g.src.len());
                }
            }
        }
        let mut out_shape = shape;
        out_shape[1] = t_out;
        let name = match kind {
            WindowKind::Max => "pool_temporal_max",
            WindowKind::Avg => "pool_temporal_avg",
            WindowKind::Last => "pool_temporal_last",
        };
        record_gather(self, name, out_shape, g)
    }

    /// Non-overlapping `fh x fw` windows over the last two axes.
    pub fn pool_spatial(&self, fh: usize, fw: usize, kind: WindowKind) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        rank_at_least("pool_spatial", &shape, 2)?;
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 {
            return Err(TensorError::invalid(
                "pool_spatial",
                format!("{h}x{w} is not divisible by {fh}x{fw}"),
            ));
        }
        if fh == 1 && fw == 1 {
            return Ok(*self);
        }
        let outer: usize = shape[..nd - 2].iter().product();
        let (ho, wo) = (h / fh, w / fw);
        let xd = xv.data();
        let mut g = Gather {
            src: Vec::new(),
            weight: Vec::new(),
            offsets: vec![0],
        };
        for b in 0..outer {
            for i in 0..ho {
                for j in 0..wo {
                    let cells = (0..fh).flat_map(|di| (0..fw).map(move |dj| (b * h + i * fh + di) * w + j * fw + dj));
                    match kind {
                        WindowKind::Avg => {
                            for s in cells {
                                g.src.push(s);
                                g.weight.push(1.0 / (fh * fw) as f64);
                            }
                        }
                        WindowKind::Max => {
                            let best = cells.reduce(|a, b| if xd[b] > xd[a] { b } else { a }).expect("window");
                            g.src.push(best);
                            g.weight.push(1.0);
                        }
                        WindowKind::Last => {
                            return Err(TensorError::invalid("pool_spatial", "Last is a temporal window"));
                        }
                    }
                    g.offsets.push(g.src.len());
                }
            }
        }
        let mut out_shape = shape;
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        let name = if kind == WindowKind::Max {
            "pool_spatial_max"
        } else {
            "pool_spatial_avg"
        };
        record_gather(self, name, out_shape, g)
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_spatial(&self, fh: usize, fw: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        rank_at_least("upsample_spatial", &shape, 2)?;
        if fh == 0 || fw == 0 {
            return Err(TensorError::invalid("upsample_spatial", "zero factor"));
        }
        if fh == 1 && fw == 1 {
            return Ok(*self);
        }
        let nd = shape.len();
        let (h, w) = (shape[nd - 2], shape[nd - 1]);
        let outer: usize = shape[..nd - 2].iter().product();
        let (ho, wo) = (h * fh, w * fw);
        let mut g = Gather {
            src: Vec::with_capacity(outer * ho * wo),
            weight: vec![1.0; outer * ho * wo],
            offsets: (0..=outer * ho * wo).collect(),
        };
        for b in 0..outer {
            for i in 0..ho {
                for j in 0..wo {
                    g.src.push((b * h + i / fh) * w + j / fw);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[nd - 2] = ho;
        out_shape[nd - 1] = wo;
        record_gather(self, "upsample_spatial", out_shape, g)
    }

    /// Mixes frames along axis 1 with a constant `[T_out, T]` matrix:
    /// `out[c, j, p] = sum_t weights[j, t] * x[c, t, p]`.
    pub fn mix_time(&self, weights: &Tensor) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        rank_at_least("mix_time", &shape, 2)?;
        let ws = weights.shape();
        if ws.len() != 2 || ws[1] != shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "mix_time",
                lhs: shape,
                rhs: ws.to_vec(),
            });
        }
        let (t_out, t) = (ws[0], ws[1]);
        let outer = shape[0];
        let inner: usize = shape[2..].iter().product();
        let xd = xv.data();
        let wd = weights.data();
        let mut out = vec![0.0; outer * t_out * inner];
        for c in 0..outer {
            for j in 0..t_out {
                let dst = &mut out[(c * t_out + j) * inner..(c * t_out + j + 1) * inner];
                for ti in 0..t {
                    let wv = wd[j * t + ti];
                    if wv == 0.0 {
                        continue;
                    }
                    let src = &xd[(c * t + ti) * inner..(c * t + ti + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += wv * x);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[1] = t_out;
        let out = Tensor::new(out_shape, out)?;
        let wd = wd.to_vec();
        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let mut gx = vec![0.0; outer * t * inner];
            for c in 0..outer {
                for j in 0..t_out {
                    let gs = &ctx.grad[(c * t_out + j) * inner..(c * t_out + j + 1) * inner];
                    for ti in 0..t {
                        let wv = wd[j * t + ti];
                        if wv == 0.0 {
                            continue;
                        }
                        let dst = &mut gx[(c * t + ti) * inner..(c * t + ti + 1) * inner];
                        dst.iter_mut().zip(gs).for_each(|(d, &g)| *d += wv * g);
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.tape().record("mix_time", &[*self], out, backward))
    }
}
