use cfn_autograd::{Tape, Tensor};
use cfn_core::gridpool::{
    compute_grid, fixed_pool, grid_pool, grid_sample, grid_unpool, invert_grid, ConfidenceHeadConfig, FixedPool, GridMode, GridSpec,
};
use cfn_core::params::{Bound, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct evaluation of the grid from the closed form
/// `q_t = T (t + 1 - sum_{i<=t} p_i) / (n - sum_i p_i)` with compensated sums.
fn oracle_q(p: &[f64], frames: usize) -> Vec<f64> {
    fn neumaier(values: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut c) = (0.0f64, 0.0f64);
        for v in values {
            let t = sum + v;
            c += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
            sum = t;
        }
        sum + c
    }
    let n = p.len() as f64;
    let denom = n - neumaier(p.iter().copied());
    (0..p.len())
        .map(|t| {
            let num = (t + 1) as f64 - neumaier(p[..=t].iter().copied());
            frames as f64 * num / denom
        })
        .collect()
}

fn random_layout(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let factor = [1, 2, 4, 8][rng.random_range(0..4)];
    let max_slots = 64 / factor;
    let n = rng.random_range(1..=max_slots);
    (n * factor, n)
}

#[test]
fn grid_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (frames, n) = random_layout(&mut rng);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.001..0.999)).collect();
        let tape = Tape::new();
        let pv = tape.leaf(Tensor::vector(&p));
        let grid = compute_grid(&pv, frames).unwrap();
        let q = grid.q.value();
        let expected = oracle_q(&p, frames);
        for (a, b) in q.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12, "q {a} vs oracle {b}");
        }
        assert!(q.data().windows(2).all(|w| w[1] > w[0]), "q not increasing: {:?}", q.data());
        assert!((q.data()[n - 1] - frames as f64).abs() <= 1e-12);
        let s = grid.s.value();
        for (s, q) in s.data().iter().zip(q.data()) {
            assert_eq!(*s, (q - 1.0).max(0.0));
        }
    }
}

fn random_features(rng: &mut ChaCha8Rng, c: usize, t: usize, hw: usize) -> Tensor {
    Tensor::from_fn(&[c, t, hw, hw], |_| rng.random_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn forced_uniform_grid_pool_equals_striding(
        seed in any::<u64>(),
        c in 1usize..4,
        factor_idx in 0usize..3,
        slots in 1usize..9,
        hw in 1usize..3,
    ) {
        let factor = [2, 4, 8][factor_idx];
        let frames = factor * slots;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_features(&mut rng, c, frames, hw);
        let tape = Tape::new();
        let store = ParamStore::from_pairs(Vec::new()).unwrap();
        let params = Bound::new(&tape, &store, false);
        let head = ConfidenceHeadConfig::for_factor(factor, 4).unwrap();
        let xv = tape.constant(x);
        let (pooled, _) = grid_pool(&xv, &head, &params, "g", GridMode::ForcedUniform).unwrap();
        let strided = fixed_pool(&xv, FixedPool::Stride, factor).unwrap();
        prop_assert_eq!(pooled.shape(), strided.shape());
        prop_assert!(pooled.value().max_abs_diff(&strided.value()) <= 1e-12);
    }

    #[test]
    fn learned_grids_stay_inside_the_input(
        p in prop::collection::vec(0.01f64..0.99, 1..17),
        factor in 1usize..5,
    ) {
        let spec = GridSpec::from_confidences(&p, p.len() * factor).unwrap();
        prop_assert!(spec.s.iter().all(|&s| (0.0..=(spec.frames - 1) as f64).contains(&s)));
        prop_assert!(spec.s.windows(2).all(|w| w[1] >= w[0]));
    }
}

#[test]
fn inverse_map_recovers_slot_indices() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let (frames, n) = random_layout(&mut rng);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let spec = GridSpec::from_confidences(&p, frames).unwrap();
        let knots: Vec<f64> = spec.q.iter().map(|q| q - 1.0).collect();
        let tape = Tape::new();
        let kv = tape.constant(Tensor::vector(&knots));
        let back = invert_grid(&kv, &knots).unwrap();
        for (j, v) in back.value().data().iter().enumerate() {
            assert!((v - j as f64).abs() <= 1e-9, "slot {j} came back as {v}");
        }
    }
}

#[test]
fn uniform_pool_then_unpool_reproduces_a_ramp() {
    for (frames, factor) in [(32, 4), (64, 4), (16, 2), (24, 8)] {
        let n = frames / factor;
        let ramp = Tensor::from_fn(&[1, frames], |i| 0.5 + 2.0 * i as f64);
        let tape = Tape::new();
        let x = tape.constant(ramp.clone());
        let p = tape.constant(Tensor::full(&[n], 0.5));
        let grid = compute_grid(&p, frames).unwrap();
        let pooled = grid_sample(&x, &grid.s).unwrap();
        let back = grid_unpool(&pooled, &grid, frames).unwrap();
        let out = back.value();
        let first = grid.spec.s[0].ceil() as usize;
        let last = grid.spec.s[n - 1].floor() as usize;
        for t in first..=last {
            let want = ramp.data()[t];
            let got = out.data()[t];
            assert!((got - want).abs() <= 1e-9, "frame {t}: {got} vs {want}");
        }
    }
}

#[test]
fn skewed_grid_is_undone_by_unpooling() {
    let frames = 32;
    let p = [0.9, 0.9, 0.2, 0.2, 0.2, 0.2, 0.9, 0.5];
    let tape = Tape::new();
    let pv = tape.constant(Tensor::vector(&p));
    let grid = compute_grid(&pv, frames).unwrap();
    let ramp = Tensor::from_fn(&[1, frames], |i| i as f64);
    let pooled = grid_sample(&tape.constant(ramp), &grid.s).unwrap();
    let back = grid_unpool(&pooled, &grid, frames).unwrap();
    let out = back.value();
    for t in 3..frames {
        assert!((out.data()[t] - t as f64).abs() <= 1e-9, "frame {t}: {}", out.data()[t]);
    }
}
