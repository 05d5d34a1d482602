use crate::error::{Result, TensorError};
use crate::tape::{BackwardCtx, Var};
use crate::tensor::{numel, Tensor};

/// Splits `shape` around `axis` into (outer, len, inner) element counts.
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<'t> Var<'t> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let xv = self.value();
        let out = xv.reshape(shape)?;
        let backward = Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]);
        Ok(self.tape().record("reshape", &[*self], out, backward))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "narrow",
                axis,
                ndim: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} outside axis of size {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split(&shape, axis);
        let xd = xv.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let mut gx = vec![0.0; outer * full * inner];
            for o in 0..outer {
                let base = (o * full + start) * inner;
                let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                gx[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(gx)]
        });
        Ok(self.tape().record("narrow", &[*self], out, backward))
    }
}

/// Concatenates along `axis`; all other axes must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    if parts.len() == 1 {
        return Ok(*first);
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::InvalidAxis {
            op: "concat",
            axis,
            ndim: base.len(),
        });
    }
    for v in &values[1..] {
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(&base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = split(&base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut data = Vec::with_capacity(numel(&out_shape));
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let out = Tensor::new(out_shape, data)?;
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
        let mut off = 0;
        for _ in 0..outer {
            for (g, &l) in grads.iter_mut().zip(&lens) {
                g.extend_from_slice(&ctx.grad[off..off + l * inner]);
                off += l * inner;
            }
        }
        grads.into_iter().map(Some).collect()
    });
    Ok(first.tape().record("concat", parts, out, backward))
}
