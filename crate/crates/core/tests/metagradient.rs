//! Metagradients against finite differences of the full
//! train-then-evaluate pipeline.

use canary_audit::game::split_canaries;
use canary_audit::metacanary::{self, CanaryOptimizer, CanarySet, MetaConfig};
use canary_audit::model::{self, Activation, Dtype, Example, ModelSpec};
use canary_audit::trainer::{self, ClipNorm, DpSgdConfig, Sampling, SgdConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

struct Setup {
    spec: ModelSpec,
    data: Vec<Example>,
    canaries: CanarySet,
    cfg: DpSgdConfig,
}

fn setup(steps: usize, clip: ClipNorm, seed: u64) -> Setup {
    let spec = ModelSpec::mlp1(6, 3, 10, Activation::Tanh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<Example> = (0..24)
        .map(|i| {
            let f = (0..6).map(|_| rng.random_range(0.1..0.9)).collect();
            Example::new(i, f, rng.random_range(0..3))
        })
        .collect();
    let features = (0..8)
        .map(|_| (0..6).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let labels = (0..8).map(|_| rng.random_range(0..3)).collect();
    let canaries = CanarySet::new(features, labels, (1000..1008).collect())
        .unwrap()
        .with_assignment(split_canaries(8, seed).unwrap())
        .unwrap();
    let cfg = DpSgdConfig {
        steps,
        learning_rate: 0.05,
        clip_norm: clip,
        noise_multiplier: 0.0,
        sampling: Sampling::Poisson { q: 0.6 },
        seed,
        dtype: Dtype::F64,
        keep_checkpoints: true,
    };
    Setup {
        spec,
        data,
        canaries,
        cfg,
    }
}

fn training_set(s: &Setup, canaries: &CanarySet) -> Vec<Example> {
    let mut d = s.data.clone();
    d.extend(canaries.in_examples().unwrap());
    d
}

/// phi(A(z)) with a fixed initialization and fixed sampling stream.
fn pipeline(s: &Setup, canaries: &CanarySet) -> f64 {
    let train = training_set(s, canaries);
    let tape = trainer::dpsgd_train(&s.spec, &train, &s.cfg).unwrap();
    metacanary::surrogate_phi(&s.spec, tape.final_params(), canaries).unwrap()
}

fn fd_row(s: &Setup, i: usize) -> Vec<f64> {
    (0..s.canaries.input_dim())
        .map(|j| {
            let mut up = s.canaries.clone();
            up.features[i][j] += H;
            let mut dn = s.canaries.clone();
            dn.features[i][j] -= H;
            (pipeline(s, &up) - pipeline(s, &dn)) / (2.0 * H)
        })
        .collect()
}

fn check(s: &Setup, tol: f64) {
    let train = training_set(s, &s.canaries);
    let tape = trainer::dpsgd_train(&s.spec, &train, &s.cfg).unwrap();
    let grad = metacanary::metagradient(&tape, &train, &s.canaries, &s.spec).unwrap();
    for (i, row) in grad.iter().enumerate() {
        let fd = fd_row(s, i);
        let e = rel_err(row, &fd);
        assert!(e <= tol, "row {i}: rel err {e:e} > {tol:e}");
    }
}

#[test]
fn matches_finite_differences_unclipped() {
    check(&setup(5, ClipNorm::Unclipped, 3), 1e-5);
}

#[test]
fn matches_finite_differences_with_active_clipping() {
    let s = setup(5, ClipNorm::Norm(1.5), 4);
    // the clip must bind for some but not all examples at w_0
    let train = training_set(&s, &s.canaries);
    let tape = trainer::dpsgd_train(&s.spec, &train, &s.cfg).unwrap();
    let clipped = train
        .iter()
        .filter(|ex| {
            let g = model::grad_params(&s.spec, &tape.init_params, ex).unwrap();
            g.iter().map(|x| x * x).sum::<f64>().sqrt() > 1.5
        })
        .count();
    assert!(clipped > 0 && clipped < train.len(), "{clipped}");
    check(&s, 1e-3);
}

#[test]
fn matches_finite_differences_over_ten_steps() {
    check(&setup(10, ClipNorm::Unclipped, 5), 1e-5);
}

#[test]
fn zero_steps_reduces_to_direct_term() {
    let s = setup(0, ClipNorm::Unclipped, 6);
    let train = training_set(&s, &s.canaries);
    let tape = trainer::dpsgd_train(&s.spec, &train, &s.cfg).unwrap();
    let grad = metacanary::metagradient(&tape, &train, &s.canaries, &s.spec).unwrap();
    let w = tape.final_params();
    let split = s.canaries.assignment.as_ref().unwrap();
    for (i, row) in grad.iter().enumerate() {
        let gx = model::grad_input(&s.spec, w, &s.canaries.example(i)).unwrap();
        let sign = if split.is_in(i) { 1.0 } else { -1.0 };
        for (a, b) in row.iter().zip(&gx) {
            assert_eq!(*a, sign * b);
        }
    }
}

#[test]
fn out_canaries_only_get_the_direct_term() {
    let s = setup(5, ClipNorm::Unclipped, 7);
    let train = training_set(&s, &s.canaries);
    let tape = trainer::dpsgd_train(&s.spec, &train, &s.cfg).unwrap();
    let grad = metacanary::metagradient(&tape, &train, &s.canaries, &s.spec).unwrap();
    let split = s.canaries.assignment.as_ref().unwrap();
    for i in split.out_indices() {
        let gx = model::grad_input(&s.spec, tape.final_params(), &s.canaries.example(i)).unwrap();
        for (a, b) in grad[i].iter().zip(&gx) {
            assert_eq!(*a, -b);
        }
    }
}

#[test]
fn mismatched_assignment_is_rejected() {
    let s = setup(3, ClipNorm::Unclipped, 8);
    let train = training_set(&s, &s.canaries);
    let tape = trainer::dpsgd_train(&s.spec, &train, &s.cfg).unwrap();
    let split = s.canaries.assignment.clone().unwrap();
    let swapped = s.canaries.clone().with_assignment(split.swapped()).unwrap();
    assert!(metacanary::metagradient(&tape, &train, &swapped, &s.spec).is_err());
    let mut bare = s.canaries.clone();
    bare.assignment = None;
    assert!(metacanary::metagradient(&tape, &train, &bare, &s.spec).is_err());
}

fn meta_cfg(metasteps: usize, step_size: f64) -> MetaConfig {
    MetaConfig {
        metasteps,
        step_size,
        optimizer: CanaryOptimizer::default(),
        init: Default::default(),
        inner: SgdConfig {
            steps: 30,
            learning_rate: 0.05,
            batch_size: 16,
            seed: 0,
            dtype: Dtype::F64,
        },
        seed: 42,
    }
}

#[test]
fn zero_step_size_leaves_canaries_unchanged() {
    let s = setup(0, ClipNorm::Unclipped, 9);
    let mut start = s.canaries.clone();
    start.assignment = None;
    let out = metacanary::optimize_canaries_from(&s.data, &s.spec, &meta_cfg(1, 0.0), start.clone()).unwrap();
    assert_eq!(out.canaries, start);
    assert_eq!(out.phi_log.len(), 1);
}

#[test]
fn split_is_fair_across_metasteps() {
    let mut counts = [0usize; 10];
    for step in 0..1000 {
        let split = split_canaries(10, metacanary::metastep_seed(7, step)).unwrap();
        for i in split.in_indices() {
            counts[i] += 1;
        }
    }
    for c in counts {
        assert!((c as f64 / 1000.0 - 0.5).abs() <= 0.05, "{c}");
    }
}
