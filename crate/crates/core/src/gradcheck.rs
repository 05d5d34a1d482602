//! Finite-difference checks of every differentiable operator in the model.

use std::time::Instant;

use cfn_autograd::{finite_diff_grad, max_relative_error, BackwardCtx, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::fusion::{
    apply_site, attention_mask, calibrate, declare_mask, fuse, mask_prefix, prepare_level, scale_shift,
    Calibration, FusionSiteConfig, GaussianBank, ReduceMode,
};
use crate::gridpool::{compute_grid, confidence_head, grid_sample, grid_unpool, ConfidenceHeadConfig};
use crate::losseval::{detection_loss, FrameLabels};
use crate::params::{Bound, ParamDecl, ParamStore};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

/// Inputs for one check. The first `inputs.len()` tape variables are
/// differentiated; `params` (if any) follow them in store order.
pub struct Sample {
    pub inputs: Vec<Tensor>,
    pub params: ParamStore,
    pub weights: Vec<Tensor>,
    pub labels: Option<FrameLabels>,
    pub bank: Option<GaussianBank>,
    pub reduce: ReduceMode,
}

impl Sample {
    fn new(inputs: Vec<Tensor>) -> Self {
        Self {
            inputs,
            params: ParamStore::from_pairs(Vec::new()).expect("empty store"),
            weights: Vec::new(),
            labels: None,
            bank: None,
            reduce: ReduceMode::Cthw,
        }
    }

    fn all_tensors(&self) -> Vec<Tensor> {
        self.inputs.iter().chain(self.params.tensors()).cloned().collect()
    }
}

pub trait GradCase: Sync {
    fn name(&self) -> &'static str;
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample;
    /// Scalar objective; `vars` covers inputs then parameters.
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>>;
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let d = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| d.sample(rng))
}

fn random_params(rng: &mut ChaCha8Rng, decls: &[ParamDecl]) -> ParamStore {
    let pairs = decls
        .iter()
        .map(|d| (d.name.clone(), normal(rng, &d.shape, 0.5)))
        .collect();
    ParamStore::from_pairs(pairs).expect("unique names")
}

/// `sum(x * w)` with a fixed random `w`, so every output element matters.
fn project<'t>(tape: &'t Tape, x: &Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(x.mul(&tape.constant(w.clone()))?.sum()?)
}

fn split<'a, 't>(vars: &'a [Var<'t>], s: &Sample) -> (&'a [Var<'t>], &'a [Var<'t>]) {
    vars.split_at(s.inputs.len())
}

/// Confidences away from the edges of (0, 1).
fn confidences(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn(&[n], |_| rng.random_range(0.05..0.95))
}

struct ConfidenceHead;
const HEAD: &str = "head";

fn head_cfg() -> ConfidenceHeadConfig {
    ConfidenceHeadConfig::for_factor(4, 4).expect("valid factor")
}

impl GradCase for ConfidenceHead {
    fn name(&self) -> &'static str {
        "confidence_head"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let mut s = Sample::new(vec![normal(rng, &[3, 8, 2, 2], 1.0)]);
        s.params = random_params(rng, &head_cfg().declare(HEAD, 3));
        s.weights = vec![normal(rng, &[2], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let (x, p) = split(vars, s);
        let params = Bound::from_vars(tape, &s.params, p)?;
        let conf = confidence_head(&x[0], &head_cfg(), &params, HEAD)?;
        project(tape, &conf, &s.weights[0])
    }
}

struct ComputeGrid;

impl GradCase for ComputeGrid {
    fn name(&self) -> &'static str {
        "compute_grid"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let mut s = Sample::new(vec![confidences(rng, 4)]);
        s.weights = vec![normal(rng, &[4], 1.0), normal(rng, &[4], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let grid = compute_grid(&vars[0], 16)?;
        Ok(project(tape, &grid.q, &s.weights[0])?.add(&project(tape, &grid.s, &s.weights[1])?)?)
    }
}

struct GridSample;

impl GradCase for GridSample {
    fn name(&self) -> &'static str {
        "grid_sample"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let x = normal(rng, &[2, 6, 2], 1.0);
        let pos = Tensor::from_fn(&[4], |_| rng.random_range(0..5) as f64 + rng.random_range(0.05..0.95));
        let mut s = Sample::new(vec![x, pos]);
        s.weights = vec![normal(rng, &[2, 4, 2], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        project(tape, &grid_sample(&vars[0], &vars[1])?, &s.weights[0])
    }
}

struct GridUnpool;

impl GradCase for GridUnpool {
    fn name(&self) -> &'static str {
        "grid_unpool"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let mut s = Sample::new(vec![normal(rng, &[3, 4], 1.0), confidences(rng, 4)]);
        s.weights = vec![normal(rng, &[3, 24], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let grid = compute_grid(&vars[1], 16)?;
        project(tape, &grid_unpool(&vars[0], &grid, 24)?, &s.weights[0])
    }
}

struct AttentionMask;

impl GradCase for AttentionMask {
    fn name(&self) -> &'static str {
        "attention_mask"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let mut s = Sample::new(vec![normal(rng, &[3, 4, 2, 2], 1.0)]);
        s.params = random_params(rng, &declare_mask(1, 3));
        s.weights = vec![normal(rng, &[3, 4, 2, 2], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let (x, p) = split(vars, s);
        let params = Bound::from_vars(tape, &s.params, p)?;
        project(tape, &attention_mask(&x[0], &params, &mask_prefix(1))?, &s.weights[0])
    }
}

struct Calibrate;

impl GradCase for Calibrate {
    fn name(&self) -> &'static str {
        "calibrate"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let centers: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..15.0)).collect();
        let mut s = Sample::new(vec![normal(rng, &[3, 16, 2], 1.0)]);
        s.bank = Some(GaussianBank::new(centers, 16, 2.0).expect("valid bank"));
        s.weights = vec![normal(rng, &[3, 4, 2], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let bank = s.bank.as_ref().expect("bank");
        project(tape, &calibrate(&vars[0], bank)?, &s.weights[0])
    }
}

fn site(reduce: ReduceMode, mask: bool) -> FusionSiteConfig {
    FusionSiteConfig {
        site: 2,
        levels: vec![(1, 2), (2, 3)],
        reduce,
        mask,
        channels: 3,
    }
}

const REDUCE_MODES: [ReduceMode; 3] = [ReduceMode::C, ReduceMode::Chw, ReduceMode::Cthw];

struct ScaleShift;

impl GradCase for ScaleShift {
    fn name(&self) -> &'static str {
        "scale_shift"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let reduce = REDUCE_MODES[rng.random_range(0..3)];
        let mut s = Sample::new(vec![normal(rng, &[5, 4, 2, 2], 1.0)]);
        s.params = random_params(rng, &site(reduce, false).declare());
        let out = match reduce {
            ReduceMode::C => [3, 1, 1, 1],
            ReduceMode::Chw => [3, 1, 2, 2],
            ReduceMode::Cthw => [3, 4, 2, 2],
        };
        s.weights = vec![normal(rng, &out, 1.0), normal(rng, &out, 1.0)];
        s.reduce = reduce;
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let (x, p) = split(vars, s);
        let params = Bound::from_vars(tape, &s.params, p)?;
        let (a, b) = scale_shift(&x[0], &site(s.reduce, false), &params)?;
        Ok(project(tape, &a, &s.weights[0])?.add(&project(tape, &b, &s.weights[1])?)?)
    }
}

struct Fuse;

impl GradCase for Fuse {
    fn name(&self) -> &'static str {
        "fuse"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let a_shape: &[usize] = if rng.random_bool(0.5) { &[3, 1, 1, 1] } else { &[3, 4, 2, 2] };
        let a = Tensor::from_fn(a_shape, |_| rng.random_range(0.05..0.95));
        let mut s = Sample::new(vec![normal(rng, &[3, 4, 2, 2], 1.0), a, normal(rng, &[3, 4, 1, 1], 1.0)]);
        s.weights = vec![normal(rng, &[3, 4, 2, 2], 1.0)];
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        project(tape, &fuse(&vars[0], &vars[1], &vars[2])?, &s.weights[0])
    }
}

struct DetectionLoss;

impl GradCase for DetectionLoss {
    fn name(&self) -> &'static str {
        "detection_loss"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let (k, t) = (3, 10);
        let mut labels = Vec::new();
        for c in 0..k {
            if rng.random_bool(0.7) {
                let start = rng.random_range(0..t - 2);
                labels.push((c, start, rng.random_range(start + 1..=t)));
            }
        }
        let mut s = Sample::new(vec![normal(rng, &[k, t], 2.0)]);
        s.labels = Some(FrameLabels::from_intervals(k, t, &labels).expect("valid intervals"));
        s
    }
    fn eval<'t>(&self, _tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        detection_loss(&vars[0], s.labels.as_ref().expect("labels"))
    }
}

/// Positive values with one clearly largest element per 2x2 window, so
/// max pooling stays away from ties under finite-difference probes.
fn separated_windows(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let mut t = Tensor::from_fn(shape, |_| rng.random_range(0.1..0.5));
    let planes = t.numel() / (h * w);
    for plane in 0..planes {
        for i in (0..h).step_by(2) {
            for j in (0..w).step_by(2) {
                let (di, dj) = (rng.random_range(0..2), rng.random_range(0..2));
                t.data_mut()[plane * h * w + (i + di) * w + j + dj] = rng.random_range(2.0..3.0);
            }
        }
    }
    t
}

/// Mask, calibration, concatenation, scale/shift and fusion on a two-level toy.
struct FusionChain;

impl GradCase for FusionChain {
    fn name(&self) -> &'static str {
        "fusion_chain"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        let reduce = REDUCE_MODES[rng.random_range(0..3)];
        let cfg = site(reduce, true);
        let mut decls = declare_mask(1, 2);
        decls.extend(declare_mask(2, 3));
        decls.extend(cfg.declare());
        let centers: Vec<f64> = (0..4).map(|j| 2.0 * j as f64 + rng.random_range(0.0..2.0)).collect();
        let mut s = Sample::new(vec![
            normal(rng, &[3, 4, 2, 2], 1.0),
            separated_windows(rng, &[2, 8, 4, 4]),
            normal(rng, &[3, 8, 2, 2], 1.0),
        ]);
        s.params = random_params(rng, &decls);
        // keeps masks near 0.5 so the planted window maxima survive masking
        for i in 0..s.params.len() {
            if s.params.names()[i].contains("conv1") {
                let t = s.params.tensor_mut(i);
                t.data_mut().iter_mut().for_each(|v| *v *= 0.2);
            }
        }
        s.bank = Some(GaussianBank::new(centers, 8, 1.0).expect("valid bank"));
        s.weights = vec![normal(rng, &[3, 4, 2, 2], 1.0)];
        s.reduce = reduce;
        s
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], s: &'t Sample) -> Result<Var<'t>> {
        let (x, p) = split(vars, s);
        let params = Bound::from_vars(tape, &s.params, p)?;
        let cfg = site(s.reduce, true);
        let bank = s.bank.as_ref();
        let levels = [
            prepare_level(&x[1], 1, &cfg, Calibration::Gaussian, bank, &params)?,
            prepare_level(&x[2], 2, &cfg, Calibration::Gaussian, bank, &params)?,
        ];
        project(tape, &apply_site(&x[0], &levels, &cfg, &params)?, &s.weights[0])
    }
}

/// A sigmoid whose backward pass is off by 2%; the suite must reject it.
pub struct CorruptedSigmoid;

impl GradCase for CorruptedSigmoid {
    fn name(&self) -> &'static str {
        "corrupted_sigmoid"
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Sample {
        Sample::new(vec![normal(rng, &[6], 1.0)])
    }
    fn eval<'t>(&self, tape: &'t Tape, vars: &[Var<'t>], _s: &'t Sample) -> Result<Var<'t>> {
        let x = vars[0];
        let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
        let backward = Box::new(|ctx: &BackwardCtx<'_>| {
            let g = ctx
                .grad
                .iter()
                .zip(ctx.output.data())
                .map(|(g, y)| 1.02 * g * y * (1.0 - y))
                .collect();
            vec![Some(g)]
        });
        Ok(tape.record("corrupted_sigmoid", &[x], out, backward).sum()?)
    }
}

pub fn default_cases() -> Vec<Box<dyn GradCase>> {
    vec![
        Box::new(ConfidenceHead),
        Box::new(ComputeGrid),
        Box::new(GridSample),
        Box::new(GridUnpool),
        Box::new(AttentionMask),
        Box::new(Calibrate),
        Box::new(ScaleShift),
        Box::new(Fuse),
        Box::new(DetectionLoss),
        Box::new(FusionChain),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub worst_seed: u64,
    pub seconds: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Worst relative error over all inputs and parameters for one seed.
pub fn check_case(case: &dyn GradCase, seed: u64) -> Result<f64> {
    Ok(check_case_inputs(case, seed)?.into_iter().fold(0.0, |a, e| if e.is_nan() { f64::INFINITY } else { a.max(e) }))
}

/// Relative error per differentiated tensor (inputs, then parameters).
pub fn check_case_inputs(case: &dyn GradCase, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = case.sample(&mut rng);
    let all = sample.all_tensors();
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = all.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = case.eval(&tape, &vars, &sample)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&all)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let mut errors = Vec::with_capacity(all.len());
    let mut probe = all.clone();
    for k in 0..all.len() {
        let mut failure = None;
        let numeric = finite_diff_grad(
            |xk| {
                probe[k] = xk.clone();
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = probe.iter().map(|t| tape.constant(t.clone())).collect();
                match case.eval(&tape, &vars, &sample) {
                    Ok(v) => v.value().item(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &all[k],
            STEP,
        );
        probe[k] = all[k].clone();
        if let Some(e) = failure {
            return Err(e);
        }
        errors.push(max_relative_error(&analytic[k], &numeric));
    }
    Ok(errors)
}

pub fn run_case(case: &dyn GradCase, seeds: usize) -> Result<CaseReport> {
    let start = Instant::now();
    let mut worst = (0.0, 0);
    for seed in 0..seeds as u64 {
        let e = check_case(case, seed)?;
        if e > worst.0 || e.is_nan() {
            worst = (e, seed);
        }
    }
    Ok(CaseReport {
        name: case.name(),
        seeds,
        max_rel_error: worst.0,
        worst_seed: worst.1,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_suite(cases: &[Box<dyn GradCase>], seeds: usize) -> Result<Vec<CaseReport>> {
    cases.iter().map(|c| run_case(c.as_ref(), seeds)).collect()
}

pub const REPORT_SCHEMA: &str = "cfn-gradcheck/1";

pub fn report_csv(reports: &[CaseReport]) -> String {
    let mut out = String::from("schema,operator,seeds,max_rel_error,worst_seed,passed\n");
    for r in reports {
        out.push_str(&format!(
            "{REPORT_SCHEMA},{},{},{:e},{},{}\n",
            r.name,
            r.seeds,
            r.max_rel_error,
            r.worst_seed,
            r.passed()
        ));
    }
    out
}
