//! Rayon against the sequential fallback. Run once as is and once with
//! `--no-default-features`; the benchmark ids carry the mode.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use canary_audit::epsilon::Procedure;
use canary_audit::game::split_canaries;
use canary_audit::metacanary::{self, CanarySet};
use canary_audit::model::{Activation, Dtype, Example, ModelSpec};
use canary_audit::par;
use canary_audit::simulate::{mc_soundness_oracle, SoundnessConfig};
use canary_audit::trainer::{self, ClipNorm, DpSgdConfig, Sampling};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mode() -> &'static str {
    if par::is_parallel() {
        "rayon"
    } else {
        "sequential"
    }
}

fn data(n: usize, dim: usize, classes: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    (0..n)
        .map(|i| {
            Example::new(
                i as u64,
                (0..dim).map(|_| rng.random_range(0.0..1.0)).collect(),
                i % classes,
            )
        })
        .collect()
}

fn dp_config(steps: usize, q: f64) -> DpSgdConfig {
    DpSgdConfig {
        steps,
        learning_rate: 0.01,
        clip_norm: ClipNorm::Norm(1.0),
        noise_multiplier: 1.0,
        sampling: Sampling::Poisson { q },
        seed: 1,
        dtype: Dtype::F64,
        keep_checkpoints: true,
    }
}

fn batch_gradients(c: &mut Criterion) {
    let spec = ModelSpec::mlp1(32, 4, 32, Activation::Tanh);
    let d = data(2000, 32, 4);
    let cfg = dp_config(10, 0.5);
    c.bench_with_input(BenchmarkId::new("dpsgd_10_steps_q0.5_n2000", mode()), &d, |b, d| {
        b.iter(|| trainer::dpsgd_train(&spec, d, &cfg).unwrap())
    });
}

fn metagradient(c: &mut Criterion) {
    let spec = ModelSpec::mlp1(16, 4, 16, Activation::Tanh);
    let mut train = data(300, 16, 4);
    let canaries = CanarySet::new(
        (0..40).map(|i| train[i].features.clone()).collect(),
        (0..40).map(|i| (i + 1) % 4).collect(),
        (10_000..10_040).collect(),
    )
    .and_then(|c| c.with_assignment(split_canaries(40, 3)?))
    .unwrap();
    train.extend(canaries.in_examples().unwrap());
    let cfg = dp_config(20, 0.2);
    let tape = trainer::dpsgd_train(&spec, &train, &cfg).unwrap();
    c.bench_function(&format!("metagradient_20_steps/{}", mode()), |b| {
        b.iter(|| metacanary::metagradient(&tape, &train, &canaries, &spec).unwrap())
    });
}

fn soundness(c: &mut Criterion) {
    let mut g = c.benchmark_group("mc_soundness_oracle");
    g.sample_size(10);
    for procedure in [Procedure::Steinke, Procedure::Pairs] {
        let cfg = SoundnessConfig {
            epsilon0: 1.0,
            m: 1000,
            guesses: 200,
            trials: 50,
            procedure,
            tau: 0.05,
            delta: 0.0,
            seed: 0,
        };
        g.bench_with_input(BenchmarkId::new(procedure.to_string(), mode()), &cfg, |b, cfg| {
            b.iter(|| mc_soundness_oracle(cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_gradients, metagradient, soundness);
criterion_main!(benches);
