//! Every differentiable op against central differences, h = 1e-4.

use cfn_autograd::{check_gradients, concat, ReduceKind, Result, Tape, Tensor, Var, WindowKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Sums `out` against fixed random weights so every output element matters.
fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let w = out.tape().constant(random(&mut rng, &out.shape()));
    out.mul(&w)?.sum()
}

fn assert_passes<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        let check = check_gradients(|t, v| project(f(t, v)?, seed), &inputs, H).unwrap();
        assert!(
            check.max_rel_error() < TOL,
            "{name} seed {seed}: relative error {:?}",
            check.per_input
        );
    }
}

#[test]
fn elementwise_binary() {
    assert_passes("add", &[&[2, 3, 4], &[3, 1]], |_, v| v[0].add(&v[1]));
    assert_passes("sub", &[&[2, 3], &[2, 3]], |_, v| v[0].sub(&v[1]));
    assert_passes("mul", &[&[4, 1, 2], &[3, 2]], |_, v| v[0].mul(&v[1]));
    assert_passes("div", &[&[3, 2], &[2]], |_, v| {
        let denom = v[1].square().shift(0.5);
        v[0].div(&denom)
    });
}

#[test]
fn elementwise_unary() {
    assert_passes("sigmoid", &[&[5, 3]], |_, v| Ok(v[0].sigmoid()));
    assert_passes("softplus", &[&[5, 3]], |_, v| Ok(v[0].scale(4.0).softplus()));
    assert_passes("exp_ln", &[&[6]], |_, v| Ok(v[0].exp().shift(1.0).ln()));
    // inputs stay away from the kink by construction of the random range
    assert_passes("relu", &[&[7]], |_, v| Ok(v[0].shift(0.001).relu()));
}

#[test]
fn reductions() {
    assert_passes("sum", &[&[2, 3, 4]], |_, v| v[0].reduce(&[0, 2], ReduceKind::Sum));
    assert_passes("mean", &[&[2, 3, 4]], |_, v| v[0].reduce_keepdim(&[1], ReduceKind::Mean));
    assert_passes("max", &[&[3, 5]], |_, v| v[0].reduce(&[1], ReduceKind::Max));
    assert_passes("cumsum", &[&[3, 5]], |_, v| v[0].cumsum(1));
}

#[test]
fn convolutions() {
    assert_passes("conv_temporal", &[&[3, 8, 2, 2], &[4, 3, 3], &[4]], |_, v| {
        v[0].conv_temporal(&v[1], Some(&v[2]), 2, 1)
    });
    assert_passes("conv_temporal_k5", &[&[2, 9, 1, 3], &[2, 2, 5]], |_, v| {
        v[0].conv_temporal(&v[1], None, 1, 2)
    });
    assert_passes("conv_pointwise", &[&[3, 4, 2, 2], &[5, 3], &[5]], |_, v| {
        v[0].conv_pointwise(&v[1], Some(&v[2]))
    });
}

#[test]
fn windows_and_shapes() {
    assert_passes("pool_temporal_avg", &[&[2, 8, 3]], |_, v| v[0].pool_temporal(4, WindowKind::Avg));
    assert_passes("pool_temporal_max", &[&[2, 8, 3]], |_, v| v[0].pool_temporal(2, WindowKind::Max));
    assert_passes("pool_spatial_max", &[&[2, 3, 4, 4]], |_, v| v[0].pool_spatial(2, 2, WindowKind::Max));
    assert_passes("upsample", &[&[2, 3, 1, 2]], |_, v| v[0].upsample_spatial(2, 2));
    assert_passes("concat_narrow", &[&[2, 3, 2], &[2, 1, 2]], |_, v| {
        concat(&[v[0], v[1]], 1)?.narrow(1, 1, 3)
    });
    assert_passes("mix_time", &[&[2, 5, 3]], |_, v| {
        let w = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin());
        v[0].mix_time(&w)
    });
}

#[test]
fn composite_network() {
    assert_passes("composite", &[&[3, 8, 2, 2], &[4, 3, 3], &[2, 4]], |_, v| {
        let h = v[0].conv_temporal(&v[1], None, 2, 1)?.sigmoid();
        let p = h.conv_pointwise(&v[2], None)?;
        let m = p.reduce(&[2, 3], ReduceKind::Mean)?;
        Ok(m.softplus())
    });
}

#[test]
fn determinism_is_bitwise() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&mut rng, &[3, 8, 2, 2]);
        let w = random(&mut rng, &[4, 3, 3]);
        let tape = Tape::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let y = xv.conv_temporal(&wv, None, 1, 1).unwrap().sigmoid().sum().unwrap();
        tape.backward(y).unwrap();
        (y.value().item().to_bits(), wv.grad().unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
