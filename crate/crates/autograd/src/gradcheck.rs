//! Central finite differences, the independent oracle for every backward pass.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as x")
}

/// `|analytic - numeric| / max(1, |numeric|)`, maximised over elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error per input.
    pub per_input: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.per_input.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences for every input tensor.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward succeeded at the base point").value().item()
    };
    let mut per_input = Vec::with_capacity(inputs.len());
    for (k, x) in inputs.iter().enumerate() {
        let mut probe = inputs.to_vec();
        let numeric = finite_diff_grad(
            |xk| {
                probe[k] = xk.clone();
                eval(&probe)
            },
            x,
            h,
        );
        per_input.push(max_relative_error(&analytic[k], &numeric));
    }
    Ok(GradCheck { per_input })
}
