use crate::error::{Result, TensorError};
use crate::tape::{BackwardCtx, Var};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Output shape with reduced axes kept as size 1, and for every input element
/// the flat index of the output element it contributes to.
fn reduction_plan(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = shape
        .iter()
        .enumerate()
        .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
        .collect();
    let kst = strides(&kept);
    let ost: Vec<usize> = (0..shape.len())
        .map(|i| if axes.contains(&i) { 0 } else { kst[i] })
        .collect();
    let n = numel(shape);
    let mut map = Vec::with_capacity(n);
    let mut coord = vec![0usize; shape.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..shape.len()).rev() {
            coord[ax] += 1;
            flat += ost[ax];
            if coord[ax] < shape[ax] {
                break;
            }
            flat -= ost[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    (kept, map)
}

fn reduce_impl<'t>(x: &Var<'t>, axes: &[usize], kind: ReduceKind, keepdim: bool) -> Result<Var<'t>> {
    let xv = x.value();
    let shape = xv.shape();
    if axes.is_empty() {
        return Err(TensorError::EmptyReduction);
    }
    let mut axes = axes.to_vec();
    axes.sort_unstable();
    axes.dedup();
    if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
        return Err(TensorError::InvalidAxis {
            op: "reduce",
            axis: bad,
            ndim: shape.len(),
        });
    }
    let (kept, map) = reduction_plan(shape, &axes);
    let count = axes.iter().map(|&a| shape[a]).product::<usize>() as f64;
    let out_n = numel(&kept);
    let xd = xv.data();
    let mut data = vec![0.0; out_n];
    let mut argmax = Vec::new();
    match kind {
        ReduceKind::Sum | ReduceKind::Mean => {
            for (i, &o) in map.iter().enumerate() {
                data[o] += xd[i];
            }
            if kind == ReduceKind::Mean {
                data.iter_mut().for_each(|v| *v /= count);
            }
        }
        ReduceKind::Max => {
            // first occurrence wins, so ties go to the lowest flat index
            data.fill(f64::NEG_INFINITY);
            argmax = vec![usize::MAX; out_n];
            for (i, &o) in map.iter().enumerate() {
                if argmax[o] == usize::MAX || xd[i] > data[o] {
                    data[o] = xd[i];
                    argmax[o] = i;
                }
            }
        }
    }
    let out_shape: Vec<usize> = if keepdim {
        kept
    } else {
        shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect()
    };
    let out = Tensor::new(out_shape, data)?;
    let name = match kind {
        ReduceKind::Sum => "reduce_sum",
        ReduceKind::Mean => "reduce_mean",
        ReduceKind::Max => "reduce_max",
    };
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let g = ctx.grad;
        let n = ctx.inputs[0].numel();
        let gx = match kind {
            ReduceKind::Sum => map.iter().map(|&o| g[o]).collect(),
            ReduceKind::Mean => map.iter().map(|&o| g[o] / count).collect(),
            ReduceKind::Max => {
                let mut gx = vec![0.0; n];
                for (o, &i) in argmax.iter().enumerate() {
                    gx[i] += g[o];
                }
                gx
            }
        };
        vec![Some(gx)]
    });
    Ok(x.tape().record(name, &[*x], out, backward))
}

impl<'t> Var<'t> {
    /// Reduces over `axes`, removing them from the shape.
    pub fn reduce(&self, axes: &[usize], kind: ReduceKind) -> Result<Var<'t>> {
        reduce_impl(self, axes, kind, false)
    }

    /// Reduces over `axes`, keeping them as size-1 axes.
    pub fn reduce_keepdim(&self, axes: &[usize], kind: ReduceKind) -> Result<Var<'t>> {
        reduce_impl(self, axes, kind, true)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        if axes.is_empty() {
            return Ok(*self);
        }
        reduce_impl(self, &axes, ReduceKind::Sum, false)
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        if axes.is_empty() {
            return Ok(*self);
        }
        reduce_impl(self, &axes, ReduceKind::Mean, false)
    }

    /// Inclusive running sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "cumsum",
                axis,
                ndim: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = xv.data().to_vec();
        for o in 0..outer {
            for i in 1..len {
                for k in 0..inner {
                    let cur = (o * len + i) * inner + k;
                    data[cur] += data[cur - inner];
                }
            }
        }
        let out = Tensor::new(shape, data)?;
        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let mut g = ctx.grad.to_vec();
            for o in 0..outer {
                for i in (0..len - 1).rev() {
                    for k in 0..inner {
                        let cur = (o * len + i) * inner + k;
                        g[cur] += g[cur + inner];
                    }
                }
            }
            vec![Some(g)]
        });
        Ok(self.tape().record("cumsum", &[*self], out, backward))
    }
}
