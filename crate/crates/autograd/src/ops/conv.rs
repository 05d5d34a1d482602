//! Factorized convolutions over `[C, T, ...]` feature maps.
//!
//! Trailing axes after `T` are flattened into a single "position" axis and
//! treated identically, so the same kernels serve `[C, T, H, W]` video
//! features and `[C, T]` sequences.

use crate::error::{Result, TensorError};
use crate::tape::{BackwardCtx, Var};
use crate::tensor::Tensor;

fn check_bias(op: &'static str, bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    /// Cross-correlation along the temporal axis (axis 1), shared across all
    /// spatial positions. `w` is `[C_out, C, k]` with odd `k`.
    pub fn conv_temporal(
        &self,
        w: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = w.value();
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.len() < 2 {
            return Err(TensorError::invalid("conv_temporal", format!("input rank {} < 2", xs.len())));
        }
        if ws.len() != 3 {
            return Err(TensorError::invalid("conv_temporal", format!("weight shape {ws:?} is not [C_out, C, k]")));
        }
        let (c_in, t_in) = (xs[0], xs[1]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in {
            return Err(TensorError::ChannelMismatch {
                op: "conv_temporal",
                expected: ws[1],
                got: c_in,
            });
        }
        if k % 2 == 0 {
            return Err(TensorError::invalid("conv_temporal", format!("kernel size {k} must be odd")));
        }
        if stride == 0 {
            return Err(TensorError::invalid("conv_temporal", "stride must be at least 1"));
        }
        if t_in + 2 * padding < k {
            return Err(TensorError::InputTooShort {
                len: t_in,
                kernel: k,
                stride,
                padding,
            });
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let bias_v = bias.map(|b| b.value());
        check_bias("conv_temporal", bias_v.as_deref(), c_out)?;
        let pos: usize = xs[2..].iter().product();

        // output frame t reads input frame t * stride + j - padding
        let src = move |t: usize, j: usize| -> Option<usize> {
            (t * stride + j).checked_sub(padding).filter(|&ti| ti < t_in)
        };

        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![0.0; c_out * t_out * pos];
        for o in 0..c_out {
            let ob = &mut out[o * t_out * pos..(o + 1) * t_out * pos];
            if let Some(b) = &bias_v {
                ob.fill(b.data()[o]);
            }
            for c in 0..c_in {
                let xb = &xd[c * t_in * pos..(c + 1) * t_in * pos];
                for j in 0..k {
                    let wv = wd[(o * c_in + c) * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    for t in 0..t_out {
                        if let Some(ti) = src(t, j) {
                            let dst = &mut ob[t * pos..(t + 1) * pos];
                            let s = &xb[ti * pos..(ti + 1) * pos];
                            dst.iter_mut().zip(s).for_each(|(d, &x)| *d += wv * x);
                        }
                    }
                }
            }
        }
        let mut out_shape = xs.to_vec();
        out_shape[0] = c_out;
        out_shape[1] = t_out;
        let out = Tensor::new(out_shape, out)?;

        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let g = ctx.grad;
            let mut gx = ctx.needs[0].then(|| vec![0.0; xd.len()]);
            let mut gw = ctx.needs[1].then(|| vec![0.0; wd.len()]);
            for o in 0..c_out {
                let gb = &g[o * t_out * pos..(o + 1) * t_out * pos];
                for c in 0..c_in {
                    let xb = &xd[c * t_in * pos..(c + 1) * t_in * pos];
                    for j in 0..k {
                        let widx = (o * c_in + c) * k + j;
                        let wv = wd[widx];
                        let mut acc = 0.0;
                        for t in 0..t_out {
                            let Some(ti) = src(t, j) else { continue };
                            let gs = &gb[t * pos..(t + 1) * pos];
                            if gw.is_some() {
                                acc += gs.iter().zip(&xb[ti * pos..(ti + 1) * pos]).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gx) = gx.as_mut() {
                                let dst = &mut gx[(c * t_in + ti) * pos..(c * t_in + ti + 1) * pos];
                                dst.iter_mut().zip(gs).for_each(|(d, &gv)| *d += wv * gv);
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += acc;
                        }
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| {
                    (0..c_out)
                        .map(|o| g[o * t_out * pos..(o + 1) * t_out * pos].iter().sum())
                        .collect()
                }));
            }
            grads
        });
        let inputs: Vec<Var<'t>> = match bias {
            Some(b) => vec![*self, *w, *b],
            None => vec![*self, *w],
        };
        Ok(self.tape().record("conv_temporal", &inputs, out, backward))
    }

    /// Per-position linear map over channels: `w` is `[C_out, C]`.
    pub fn conv_pointwise(&self, w: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let xv = self.value();
        let wv = w.value();
        let xs = xv.shape();
        let ws = wv.shape();
        if xs.is_empty() || ws.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv_pointwise",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        let (c_out, c_in) = (ws[0], ws[1]);
        if xs[0] != c_in {
            return Err(TensorError::ChannelMismatch {
                op: "conv_pointwise",
                expected: c_in,
                got: xs[0],
            });
        }
        let bias_v = bias.map(|b| b.value());
        check_bias("conv_pointwise", bias_v.as_deref(), c_out)?;
        let pos: usize = xs[1..].iter().product();
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![0.0; c_out * pos];
        for o in 0..c_out {
            let ob = &mut out[o * pos..(o + 1) * pos];
            if let Some(b) = &bias_v {
                ob.fill(b.data()[o]);
            }
            for c in 0..c_in {
                let wv = wd[o * c_in + c];
                if wv == 0.0 {
                    continue;
                }
                ob.iter_mut()
                    .zip(&xd[c * pos..(c + 1) * pos])
                    .for_each(|(d, &x)| *d += wv * x);
            }
        }
        let mut out_shape = xs.to_vec();
        out_shape[0] = c_out;
        let out = Tensor::new(out_shape, out)?;

        let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
            let xd = ctx.inputs[0].data();
            let wd = ctx.inputs[1].data();
            let g = ctx.grad;
            let gx = ctx.needs[0].then(|| {
                let mut gx = vec![0.0; xd.len()];
                for o in 0..c_out {
                    let gb = &g[o * pos..(o + 1) * pos];
                    for c in 0..c_in {
                        let wv = wd[o * c_in + c];
                        gx[c * pos..(c + 1) * pos]
                            .iter_mut()
                            .zip(gb)
                            .for_each(|(d, &gv)| *d += wv * gv);
                    }
                }
                gx
            });
            let gw = ctx.needs[1].then(|| {
                let mut gw = vec![0.0; wd.len()];
                for o in 0..c_out {
                    let gb = &g[o * pos..(o + 1) * pos];
                    for c in 0..c_in {
                        gw[o * c_in + c] = gb.iter().zip(&xd[c * pos..(c + 1) * pos]).map(|(a, b)| a * b).sum();
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs[2].then(|| (0..c_out).map(|o| g[o * pos..(o + 1) * pos].iter().sum()).collect()));
            }
            grads
        });
        let inputs: Vec<Var<'t>> = match bias {
            Some(b) => vec![*self, *w, *b],
            None => vec![*self, *w],
        };
        Ok(self.tape().record("conv_pointwise", &inputs, out, backward))
    }
}

#[cfg(test)]
mod tests {
    use crate::{Tape, Tensor, TensorError};

    #[test]
    fn ones_kernel_over_ones() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 4, 1, 1]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3]));
        let y = x.conv_temporal(&w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 4, 1, 1]);
        assert_eq!(y.value().data(), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn unit_impulse_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 5, 2, 3], |i| (i as f64 * 0.37).cos()));
        let w = tape.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = x.conv_temporal(&w, None, 1, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn strided_output_length() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 8, 1, 1]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3]));
        assert_eq!(x.conv_temporal(&w, None, 2, 1).unwrap().shape()[1], 4);
    }

    #[test]
    fn too_short_input_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        let w = tape.constant(Tensor::ones(&[1, 1, 5]));
        assert!(matches!(
            x.conv_temporal(&w, None, 1, 0),
            Err(TensorError::InputTooShort { .. })
        ));
    }

    #[test]
    fn pointwise_identity_and_sum() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 1, 2], |i| i as f64 - 2.5));
        let eye = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero = tape.constant(Tensor::zeros(&[2]));
        let y = x.conv_pointwise(&eye, Some(&zero)).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let w = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let s = x.conv_pointwise(&w, None).unwrap().value();
        let xd = x.value();
        for p in 0..6 {
            assert_eq!(s.data()[p], xd.data()[p] + xd.data()[6 + p]);
        }
    }

    #[test]
    fn pointwise_channel_mismatch() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 2, 1, 1]));
        let w = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            x.conv_pointwise(&w, None),
            Err(TensorError::ChannelMismatch { .. })
        ));
    }
}
