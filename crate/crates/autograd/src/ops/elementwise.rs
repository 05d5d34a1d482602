use crate::error::Result;
use crate::tape::{BackwardCtx, Var};
use crate::tensor::{broadcast_shape, broadcast_strides, numel, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Sigmoid,
    Relu,
    Exp,
    Ln,
    Softplus,
    Square,
    Scale(f64),
    Shift(f64),
    ClampMin(f64),
}

impl UnaryOp {
    fn name(self) -> &'static str {
        match self {
            UnaryOp::Neg => "neg",
            UnaryOp::Sigmoid => "sigmoid",
            UnaryOp::Relu => "relu",
            UnaryOp::Exp => "exp",
            UnaryOp::Ln => "ln",
            UnaryOp::Softplus => "softplus",
            UnaryOp::Square => "square",
            UnaryOp::Scale(_) => "scale",
            UnaryOp::Shift(_) => "shift",
            UnaryOp::ClampMin(_) => "clamp_min",
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Ln => x.ln(),
            UnaryOp::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryOp::Square => x * x,
            UnaryOp::Scale(c) => c * x,
            UnaryOp::Shift(c) => x + c,
            UnaryOp::ClampMin(m) => x.max(m),
        }
    }

    /// d(out)/d(x) given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Exp => y,
            UnaryOp::Ln => 1.0 / x,
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Scale(c) => c,
            UnaryOp::Shift(_) => 1.0,
            // zero subgradient strictly inside the clamped region
            UnaryOp::ClampMin(m) => {
                if x >= m {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// For each element of the broadcast output, the flat index into an input of
/// `shape`. `None` when the input already has the output shape.
fn broadcast_index(shape: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    if shape == out {
        return None;
    }
    let st = broadcast_strides(shape, out);
    let n = numel(out);
    let mut idx = Vec::with_capacity(n);
    let mut coord = vec![0usize; out.len()];
    let mut flat = 0usize;
    for _ in 0..n {
        idx.push(flat);
        for ax in (0..out.len()).rev() {
            coord[ax] += 1;
            flat += st[ax];
            if coord[ax] < out[ax] {
                break;
            }
            flat -= st[ax] * coord[ax];
            coord[ax] = 0;
        }
    }
    Some(idx)
}

#[inline]
fn at(idx: &Option<Vec<usize>>, i: usize) -> usize {
    match idx {
        Some(v) => v[i],
        None => i,
    }
}

pub(crate) fn binary<'t>(a: &Var<'t>, b: &Var<'t>, op: BinaryOp) -> Result<Var<'t>> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(op.name(), av.shape(), bv.shape())?;
    let ia = broadcast_index(av.shape(), &out_shape);
    let ib = broadcast_index(bv.shape(), &out_shape);
    let n = numel(&out_shape);
    let (ad, bd) = (av.data(), bv.data());
    let data: Vec<f64> = match (&ia, &ib) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| op.apply(x, y)).collect(),
        _ => (0..n).map(|i| op.apply(ad[at(&ia, i)], bd[at(&ib, i)])).collect(),
    };
    let out = Tensor::new(out_shape, data)?;
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
        let g = ctx.grad;
        let mut ga = ctx.needs[0].then(|| vec![0.0; ad.len()]);
        let mut gb = ctx.needs[1].then(|| vec![0.0; bd.len()]);
        for (i, &gi) in g.iter().enumerate() {
            let (ka, kb) = (at(&ia, i), at(&ib, i));
            let (da, db) = match op {
                BinaryOp::Add => (gi, gi),
                BinaryOp::Sub => (gi, -gi),
                BinaryOp::Mul => (gi * bd[kb], gi * ad[ka]),
                BinaryOp::Div => (gi / bd[kb], -gi * ad[ka] / (bd[kb] * bd[kb])),
            };
            if let Some(ga) = ga.as_mut() {
                ga[ka] += da;
            }
            if let Some(gb) = gb.as_mut() {
                gb[kb] += db;
            }
        }
        vec![ga, gb]
    });
    Ok(a.tape().record(op.name(), &[*a, *b], out, backward))
}

pub(crate) fn unary<'t>(x: &Var<'t>, op: UnaryOp) -> Var<'t> {
    let xv = x.value();
    let out = xv.map(|v| op.apply(v));
    let backward = Box::new(move |ctx: &BackwardCtx<'_>| {
        let xd = ctx.inputs[0].data();
        let yd = ctx.output.data();
        let g: Vec<f64> = ctx
            .grad
            .iter()
            .zip(xd.iter().zip(yd))
            .map(|(&g, (&x, &y))| g * op.derivative(x, y))
            .collect();
        vec![Some(g)]
    });
    x.tape().record(op.name(), &[*x], out, backward)
}

impl<'t> Var<'t> {
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(self, other, BinaryOp::Mul)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        binary(self, other, BinaryOp::Div)
    }

    pub fn neg(&self) -> Var<'t> {
        unary(self, UnaryOp::Neg)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        unary(self, UnaryOp::Sigmoid)
    }

    pub fn relu(&self) -> Var<'t> {
        unary(self, UnaryOp::Relu)
    }

    pub fn exp(&self) -> Var<'t> {
        unary(self, UnaryOp::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        unary(self, UnaryOp::Ln)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'t> {
        unary(self, UnaryOp::Softplus)
    }

    pub fn square(&self) -> Var<'t> {
        unary(self, UnaryOp::Square)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        unary(self, UnaryOp::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Var<'t> {
        unary(self, UnaryOp::Shift(c))
    }

    pub fn clamp_min(&self, min: f64) -> Var<'t> {
        unary(self, UnaryOp::ClampMin(min))
    }
}
