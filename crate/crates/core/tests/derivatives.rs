//! Model derivatives against central finite differences and closed forms.

use canary_audit::model::{self, Activation, Dtype, Example, ModelSpec, ParamVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

fn instance(spec: &ModelSpec, seed: u64) -> (ParamVector, Example, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = (0..spec.parameter_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let x: Vec<f64> = (0..spec.input_dim()).map(|_| rng.random_range(0.05..0.95)).collect();
    let v: Vec<f64> = (0..spec.parameter_count())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let label = rng.random_range(0..spec.num_classes());
    (ParamVector::new(p, Dtype::F64).unwrap(), Example::new(0, x, label), v)
}

fn shifted(p: &ParamVector, i: usize, d: f64) -> ParamVector {
    let mut v = p.values().to_vec();
    v[i] += d;
    ParamVector::new(v, Dtype::F64).unwrap()
}

fn fd_grad_params(spec: &ModelSpec, p: &ParamVector, ex: &Example) -> Vec<f64> {
    (0..p.len())
        .map(|i| {
            let up = model::loss(spec, &shifted(p, i, H), ex).unwrap();
            let dn = model::loss(spec, &shifted(p, i, -H), ex).unwrap();
            (up - dn) / (2.0 * H)
        })
        .collect()
}

fn fd_grad_input(spec: &ModelSpec, p: &ParamVector, ex: &Example) -> Vec<f64> {
    (0..ex.features.len())
        .map(|j| {
            let mut a = ex.clone();
            a.features[j] += H;
            let mut b = ex.clone();
            b.features[j] -= H;
            (model::loss(spec, p, &a).unwrap() - model::loss(spec, p, &b).unwrap()) / (2.0 * H)
        })
        .collect()
}

fn axpy(p: &ParamVector, v: &[f64], s: f64) -> ParamVector {
    ParamVector::new(p.values().iter().zip(v).map(|(a, b)| a + s * b).collect(), Dtype::F64).unwrap()
}

fn specs() -> Vec<ModelSpec> {
    vec![
        ModelSpec::logreg(5, 3),
        ModelSpec::logreg(1, 2),
        ModelSpec::mlp1(4, 3, 6, Activation::Tanh),
        ModelSpec::mlp1(7, 2, 3, Activation::Tanh),
    ]
}

#[test]
fn first_derivatives_match_finite_differences() {
    for spec in specs() {
        for seed in 0..5 {
            let (p, ex, _) = instance(&spec, seed);
            let g = model::grad_params(&spec, &p, &ex).unwrap();
            assert!(
                rel_err(&g, &fd_grad_params(&spec, &p, &ex)) <= 1e-6,
                "{spec:?} seed {seed}"
            );
            let gx = model::grad_input(&spec, &p, &ex).unwrap();
            assert!(
                rel_err(&gx, &fd_grad_input(&spec, &p, &ex)) <= 1e-6,
                "{spec:?} seed {seed}"
            );
        }
    }
}

#[test]
fn second_order_products_match_finite_differences() {
    for spec in specs() {
        for seed in 0..5 {
            let (p, ex, v) = instance(&spec, 100 + seed);
            let hv = model::hvp_w(&spec, &p, &ex, &v).unwrap();
            let up = model::grad_params(&spec, &axpy(&p, &v, H), &ex).unwrap();
            let dn = model::grad_params(&spec, &axpy(&p, &v, -H), &ex).unwrap();
            let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * H)).collect();
            assert!(rel_err(&hv, &fd) <= 1e-5, "hvp {spec:?} seed {seed}");

            let cross = model::cross_vjp_zw(&spec, &p, &ex, &v).unwrap();
            let up = model::grad_input(&spec, &axpy(&p, &v, H), &ex).unwrap();
            let dn = model::grad_input(&spec, &axpy(&p, &v, -H), &ex).unwrap();
            let fd: Vec<f64> = up.iter().zip(&dn).map(|(a, b)| (a - b) / (2.0 * H)).collect();
            assert!(rel_err(&cross, &fd) <= 1e-5, "cross {spec:?} seed {seed}");
        }
    }
}

#[test]
fn zero_direction_gives_zero_products() {
    let spec = ModelSpec::mlp1(3, 2, 4, Activation::Relu);
    let (p, ex, _) = instance(&spec, 9);
    let zero = vec![0.0; p.len()];
    assert!(model::hvp_w(&spec, &p, &ex, &zero).unwrap().iter().all(|&x| x == 0.0));
    assert!(model::cross_vjp_zw(&spec, &p, &ex, &zero)
        .unwrap()
        .iter()
        .all(|&x| x == 0.0));
}

/// Closed-form logistic-regression derivatives, written out independently.
mod closed_form {
    pub fn softmax(l: &[f64]) -> Vec<f64> {
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|x| x / s).collect()
    }

    pub fn logits(w: &[f64], x: &[f64], k: usize) -> Vec<f64> {
        let d = x.len();
        (0..k)
            .map(|c| (0..d).map(|j| w[c * d + j] * x[j]).sum::<f64>() + w[k * d + c])
            .collect()
    }
}

#[test]
fn logreg_gradients_have_closed_form() {
    let spec = ModelSpec::logreg(4, 3);
    let (p, ex, _) = instance(&spec, 21);
    let w = p.values();
    let x = &ex.features;
    let prob = closed_form::softmax(&closed_form::logits(w, x, 3));
    let delta: Vec<f64> = (0..3)
        .map(|c| prob[c] - if c == ex.label { 1.0 } else { 0.0 })
        .collect();
    let g = model::grad_params(&spec, &p, &ex).unwrap();
    for c in 0..3 {
        for j in 0..4 {
            assert!((g[c * 4 + j] - delta[c] * x[j]).abs() < 1e-14);
        }
        assert!((g[12 + c] - delta[c]).abs() < 1e-14);
    }
    let gx = model::grad_input(&spec, &p, &ex).unwrap();
    for j in 0..4 {
        let expected: f64 = (0..3).map(|c| w[c * 4 + j] * delta[c]).sum();
        assert!((gx[j] - expected).abs() < 1e-14);
    }
    // closed-form loss
    let l = model::loss(&spec, &p, &ex).unwrap();
    assert!((l + prob[ex.label].ln()).abs() < 1e-12);
}

#[test]
fn zero_weight_logreg_cross_term_is_closed_form() {
    // At w = 0: p = 1/K, delta = p - y. vᵀ ∂²L/∂w∂x = Vᵀ delta + Wᵀ(...) = Vᵀ delta
    // since W = 0. With v = e_{(c, j)} (weight entry c,j) the result is
    // delta_c in coordinate j and zero elsewhere.
    let spec = ModelSpec::logreg(3, 4);
    let p = ParamVector::zeros(spec.parameter_count(), Dtype::F64);
    let ex = Example::new(0, vec![0.2, 0.4, 0.9], 2);
    for c in 0..4 {
        for j in 0..3 {
            let mut v = vec![0.0; spec.parameter_count()];
            v[c * 3 + j] = 1.0;
            let out = model::cross_vjp_zw(&spec, &p, &ex, &v).unwrap();
            let delta_c = 0.25 - if c == 2 { 1.0 } else { 0.0 };
            for (jj, &o) in out.iter().enumerate() {
                let expected = if jj == j { delta_c } else { 0.0 };
                assert!((o - expected).abs() < 1e-15, "c={c} j={j}");
            }
        }
    }
}

#[test]
fn separable_minimizer_has_vanishing_gradient() {
    let spec = ModelSpec::logreg(1, 2);
    // a huge margin in the right direction drives the loss and gradient to 0
    let p = ParamVector::new(vec![-100.0, 100.0, 50.0, -50.0], Dtype::F64).unwrap();
    let data = [Example::new(0, vec![0.0], 0), Example::new(1, vec![1.0], 1)];
    for ex in &data {
        let g = model::grad_params(&spec, &p, ex).unwrap();
        assert!(g.iter().map(|x| x * x).sum::<f64>().sqrt() <= 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_is_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
        // shifting every output bias shifts every logit by the same constant
        let spec = ModelSpec::mlp1(3, 4, 5, Activation::Tanh);
        let (p, ex, _) = instance(&spec, seed);
        let mut v = p.values().to_vec();
        let n = v.len();
        for b in &mut v[n - 4..] {
            *b += shift;
        }
        let q = ParamVector::new(v, Dtype::F64).unwrap();
        let a = model::loss(&spec, &p, &ex).unwrap();
        let b = model::loss(&spec, &q, &ex).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn logreg_hessian_is_psd(seed in 0u64..10_000) {
        let spec = ModelSpec::logreg(4, 3);
        let (p, ex, v) = instance(&spec, seed);
        let hv = model::hvp_w(&spec, &p, &ex, &v).unwrap();
        let q: f64 = hv.iter().zip(&v).map(|(a, b)| a * b).sum();
        prop_assert!(q >= -1e-12);
    }

    #[test]
    fn derivatives_are_deterministic(seed in 0u64..10_000) {
        let spec = ModelSpec::mlp1(3, 3, 4, Activation::Tanh);
        let (p, ex, v) = instance(&spec, seed);
        let a = model::second_order(&spec, &p, &ex, &v).unwrap();
        let b = model::second_order(&spec, &p, &ex, &v).unwrap();
        prop_assert_eq!(a, b);
    }
}
