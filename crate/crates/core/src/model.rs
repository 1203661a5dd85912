//! Small differentiable models: multiclass logistic regression and a
//! one-hidden-layer MLP.
//!
//! Parameters live in one flat vector. Layouts (row-major):
//!
//! * `logreg`: `W [K x D]`, `b [K]`
//! * `mlp1`:   `W1 [H x D]`, `b1 [H]`, `W2 [K x H]`, `b2 [K]`
//!
//! All derivatives are exact. First derivatives come from a hand-written
//! backward pass; the second-order products ([`hvp_w`], [`cross_vjp_zw`]) run
//! that same backward pass over [`Dual`] numbers with the parameter tangent
//! seeded by the direction vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, AuditError, Result};
use crate::par;
use crate::scalar::{Dual, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelSpec {
    Logreg {
        input_dim: usize,
        num_classes: usize,
    },
    Mlp1 {
        input_dim: usize,
        num_classes: usize,
        hidden_dim: usize,
        #[serde(default)]
        activation: Activation,
    },
}

impl ModelSpec {
    pub fn logreg(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec::Logreg { input_dim, num_classes }
    }

    pub fn mlp1(input_dim: usize, num_classes: usize, hidden_dim: usize, activation: Activation) -> Self {
        ModelSpec::Mlp1 {
            input_dim,
            num_classes,
            hidden_dim,
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        match *self {
            ModelSpec::Logreg { input_dim, .. } | ModelSpec::Mlp1 { input_dim, .. } => input_dim,
        }
    }

    pub fn num_classes(&self) -> usize {
        match *self {
            ModelSpec::Logreg { num_classes, .. } | ModelSpec::Mlp1 { num_classes, .. } => num_classes,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match *self {
            ModelSpec::Logreg { input_dim, num_classes } => num_classes * (input_dim + 1),
            ModelSpec::Mlp1 {
                input_dim,
                num_classes,
                hidden_dim,
                ..
            } => hidden_dim * (input_dim + 1) + num_classes * (hidden_dim + 1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim() == 0 {
            return Err(invalid("model spec", "input_dim must be positive"));
        }
        if self.num_classes() < 2 {
            return Err(invalid("model spec", "num_classes must be at least 2"));
        }
        if let ModelSpec::Mlp1 { hidden_dim: 0, .. } = self {
            return Err(invalid("model spec", "hidden_dim must be positive"));
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases. Deterministic in `seed`.
    pub fn init_params(&self, seed: u64, dtype: Dtype) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.parameter_count());
        let mut layer = |rows: usize, cols: usize, values: &mut Vec<f64>| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            values.extend((0..rows * cols).map(|_| rng.random_range(-a..a)));
            values.extend(std::iter::repeat_n(0.0, rows));
        };
        match *self {
            ModelSpec::Logreg { input_dim, num_classes } => layer(num_classes, input_dim, &mut values),
            ModelSpec::Mlp1 {
                input_dim,
                num_classes,
                hidden_dim,
                ..
            } => {
                layer(hidden_dim, input_dim, &mut values);
                layer(num_classes, hidden_dim, &mut values);
            }
        }
        ParamVector::new(values, dtype).expect("init values are finite")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    /// Round a value to the precision of this dtype.
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

/// Flat model parameters. Values are stored as `f64`; under [`Dtype::F32`]
/// every entry is exactly representable as `f32` and kernels run in `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    dtype: Dtype,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, dtype: Dtype) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(AuditError::NonFinite("parameter vector"));
        }
        let values = values.into_iter().map(|v| dtype.round(v)).collect();
        Ok(Self { values, dtype })
    }

    pub fn zeros(len: usize, dtype: Dtype) -> Self {
        Self {
            values: vec![0.0; len],
            dtype,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
    pub is_canary: bool,
    pub id: u64,
}

impl Example {
    pub fn new(id: u64, features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            is_canary: false,
            id,
        }
    }

    pub fn canary(id: u64, features: Vec<f64>, label: usize) -> Self {
        Self {
            features,
            label,
            is_canary: true,
            id,
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.features.len() != spec.input_dim() {
            return Err(AuditError::DimensionMismatch {
                what: "example features",
                expected: spec.input_dim(),
                got: self.features.len(),
            });
        }
        if self.features.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(invalid(
                "example",
                format!("features of example {} outside [0,1]", self.id),
            ));
        }
        if self.label >= spec.num_classes() {
            return Err(invalid(
                "example",
                format!("label {} out of range for {} classes", self.label, spec.num_classes()),
            ));
        }
        Ok(())
    }
}

/// Per-example gradients for a batch, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct GradBundle {
    pub per_example: Vec<Vec<f64>>,
    pub input_grads: Option<Vec<Vec<f64>>>,
}

impl GradBundle {
    pub fn batch_size(&self) -> usize {
        self.per_example.len()
    }
}

struct Pass<T> {
    logits: Vec<T>,
    loss: T,
    grad_w: Vec<T>,
    grad_x: Vec<T>,
}

fn check_dims(spec: &ModelSpec, params: &[f64], features: &[f64]) -> Result<()> {
    if params.len() != spec.parameter_count() {
        return Err(AuditError::DimensionMismatch {
            what: "parameter vector",
            expected: spec.parameter_count(),
            got: params.len(),
        });
    }
    if features.len() != spec.input_dim() {
        return Err(AuditError::DimensionMismatch {
            what: "example features",
            expected: spec.input_dim(),
            got: features.len(),
        });
    }
    Ok(())
}

fn check_label(spec: &ModelSpec, label: usize) -> Result<()> {
    if label >= spec.num_classes() {
        return Err(invalid("example", format!("label {label} out of range")));
    }
    Ok(())
}

/// `out[r] = sum_c m[r, c] * x[c] + b[r]`
fn affine<T: Scalar>(m: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let cols = x.len();
    b.iter()
        .enumerate()
        .map(|(r, &br)| {
            let row = &m[r * cols..(r + 1) * cols];
            let mut acc = br;
            for (&w, &xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            acc
        })
        .collect()
}

/// Writes `delta ⊗ x` and `delta` into the weight/bias gradient slots and
/// returns `mᵀ delta` when `back` is set.
fn affine_backward<T: Scalar>(m: &[T], x: &[T], delta: &[T], gw: &mut [T], gb: &mut [T], back: bool) -> Vec<T> {
    let cols = x.len();
    let mut dx = if back { vec![T::zero(); cols] } else { Vec::new() };
    for (r, &d) in delta.iter().enumerate() {
        gb[r] = d;
        let grow = &mut gw[r * cols..(r + 1) * cols];
        for (g, &xi) in grow.iter_mut().zip(x) {
            *g = d * xi;
        }
        if back {
            let row = &m[r * cols..(r + 1) * cols];
            for (acc, &w) in dx.iter_mut().zip(row) {
                *acc += w * d;
            }
        }
    }
    dx
}

/// Softmax cross-entropy; returns (loss, p - onehot(label)).
fn softmax_xent<T: Scalar>(logits: &[T], label: usize) -> (T, Vec<T>) {
    let max = logits.iter().map(|l| l.value()).fold(f64::NEG_INFINITY, f64::max);
    let shift = T::from_f64(max);
    let mut sum = T::zero();
    for &l in logits {
        sum += (l - shift).exp();
    }
    let lse = shift + sum.ln();
    let loss = lse - logits[label];
    let mut delta: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
    delta[label] = delta[label] - T::one();
    (loss, delta)
}

fn run_pass<T: Scalar>(
    spec: &ModelSpec,
    w: &[T],
    x: &[T],
    label: usize,
    want_grads: bool,
    want_input: bool,
) -> Pass<T> {
    match *spec {
        ModelSpec::Logreg { input_dim, num_classes } => {
            let (wm, b) = w.split_at(num_classes * input_dim);
            let logits = affine(wm, b, x);
            let (loss, delta) = softmax_xent(&logits, label);
            let mut grad_w = Vec::new();
            let mut grad_x = Vec::new();
            if want_grads || want_input {
                grad_w = vec![T::zero(); w.len()];
                let (gw, gb) = grad_w.split_at_mut(num_classes * input_dim);
                grad_x = affine_backward(wm, x, &delta, gw, gb, want_input);
            }
            Pass {
                logits,
                loss,
                grad_w,
                grad_x,
            }
        }
        ModelSpec::Mlp1 {
            input_dim,
            num_classes,
            hidden_dim,
            activation,
        } => {
            let n1 = hidden_dim * input_dim;
            let n2 = num_classes * hidden_dim;
            let (w1, rest) = w.split_at(n1);
            let (b1, rest) = rest.split_at(hidden_dim);
            let (w2, b2) = rest.split_at(n2);
            let pre = affine(w1, b1, x);
            let (hidden, dact): (Vec<T>, Vec<T>) = pre
                .iter()
                .map(|&p| match activation {
                    Activation::Relu => {
                        if p.value() > 0.0 {
                            (p, T::one())
                        } else {
                            (T::zero(), T::zero())
                        }
                    }
                    Activation::Tanh => {
                        let t = p.tanh();
                        (t, T::one() - t * t)
                    }
                })
                .unzip();
            let logits = affine(w2, b2, &hidden);
            let (loss, delta) = softmax_xent(&logits, label);
            let mut grad_w = Vec::new();
            let mut grad_x = Vec::new();
            if want_grads || want_input {
                grad_w = vec![T::zero(); w.len()];
                let (g1, rest) = grad_w.split_at_mut(n1);
                let (gb1, rest) = rest.split_at_mut(hidden_dim);
                let (g2, gb2) = rest.split_at_mut(n2);
                let dh = affine_backward(w2, &hidden, &delta, g2, gb2, true);
                let dpre: Vec<T> = dh.iter().zip(&dact).map(|(&a, &b)| a * b).collect();
                grad_x = affine_backward(w1, x, &dpre, g1, gb1, want_input);
            }
            Pass {
                logits,
                loss,
                grad_w,
                grad_x,
            }
        }
    }
}

fn lift<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x)).collect()
}

fn lower<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.value()).collect()
}

fn first_order(
    spec: &ModelSpec,
    params: &ParamVector,
    features: &[f64],
    label: usize,
    want_grads: bool,
    want_input: bool,
) -> Pass<f64> {
    match params.dtype() {
        Dtype::F64 => run_pass::<f64>(spec, params.values(), features, label, want_grads, want_input),
        Dtype::F32 => {
            let p = run_pass::<f32>(
                spec,
                &lift(params.values()),
                &lift(features),
                label,
                want_grads,
                want_input,
            );
            Pass {
                logits: lower(&p.logits),
                loss: p.loss.value(),
                grad_w: lower(&p.grad_w),
                grad_x: lower(&p.grad_x),
            }
        }
    }
}

pub fn forward(spec: &ModelSpec, params: &ParamVector, ex: &Example) -> Result<Vec<f64>> {
    check_dims(spec, params.values(), &ex.features)?;
    check_label(spec, ex.label)?;
    Ok(first_order(spec, params, &ex.features, ex.label, false, false).logits)
}

/// Cross-entropy `-log softmax(logits)[label]`.
pub fn loss(spec: &ModelSpec, params: &ParamVector, ex: &Example) -> Result<f64> {
    check_dims(spec, params.values(), &ex.features)?;
    check_label(spec, ex.label)?;
    Ok(first_order(spec, params, &ex.features, ex.label, false, false).loss)
}

pub fn grad_params(spec: &ModelSpec, params: &ParamVector, ex: &Example) -> Result<Vec<f64>> {
    check_dims(spec, params.values(), &ex.features)?;
    check_label(spec, ex.label)?;
    Ok(first_order(spec, params, &ex.features, ex.label, true, false).grad_w)
}

pub fn grad_input(spec: &ModelSpec, params: &ParamVector, ex: &Example) -> Result<Vec<f64>> {
    check_dims(spec, params.values(), &ex.features)?;
    check_label(spec, ex.label)?;
    Ok(first_order(spec, params, &ex.features, ex.label, false, true).grad_x)
}

/// Loss and parameter gradient from one pass.
pub fn loss_and_grad(spec: &ModelSpec, params: &ParamVector, ex: &Example) -> Result<(f64, Vec<f64>)> {
    check_dims(spec, params.values(), &ex.features)?;
    check_label(spec, ex.label)?;
    let p = first_order(spec, params, &ex.features, ex.label, true, false);
    Ok((p.loss, p.grad_w))
}

/// Per-example gradients for a batch; rows follow the order of `batch`.
pub fn batch_grads(spec: &ModelSpec, params: &ParamVector, batch: &[&Example], with_input: bool) -> Result<GradBundle> {
    let rows = par::map_slice(batch, |ex| -> Result<(Vec<f64>, Vec<f64>)> {
        check_dims(spec, params.values(), &ex.features)?;
        check_label(spec, ex.label)?;
        let p = first_order(spec, params, &ex.features, ex.label, true, with_input);
        Ok((p.grad_w, p.grad_x))
    });
    let mut per_example = Vec::with_capacity(rows.len());
    let mut inputs = Vec::with_capacity(rows.len());
    for row in rows {
        let (g, x) = row?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AuditError::NonFinite("per-example gradient"));
        }
        per_example.push(g);
        inputs.push(x);
    }
    Ok(GradBundle {
        per_example,
        input_grads: with_input.then_some(inputs),
    })
}

/// Second-order products from one dual pass: `(H_ww v, H_xw v)`, i.e. the
/// Hessian-vector product in parameter space and `vᵀ ∂²L/∂w∂x`.
///
/// Always evaluated in `f64`, whatever the parameter dtype.
pub fn second_order(spec: &ModelSpec, params: &ParamVector, ex: &Example, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(spec, params.values(), &ex.features)?;
    check_label(spec, ex.label)?;
    if v.len() != params.len() {
        return Err(AuditError::DimensionMismatch {
            what: "direction vector",
            expected: params.len(),
            got: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(AuditError::NonFinite("direction vector"));
    }
    let w: Vec<Dual> = params.values().iter().zip(v).map(|(&p, &t)| Dual::new(p, t)).collect();
    let x: Vec<Dual> = lift(&ex.features);
    let p = run_pass(spec, &w, &x, ex.label, true, true);
    Ok((
        p.grad_w.iter().map(|d| d.du).collect(),
        p.grad_x.iter().map(|d| d.du).collect(),
    ))
}

/// Exact Hessian-vector product `(∂²L/∂w²) v`.
pub fn hvp_w(spec: &ModelSpec, params: &ParamVector, ex: &Example, v: &[f64]) -> Result<Vec<f64>> {
    second_order(spec, params, ex, v).map(|(h, _)| h)
}

/// Mixed product `vᵀ (∂²L/∂w∂x)`, a vector over input features.
pub fn cross_vjp_zw(spec: &ModelSpec, params: &ParamVector, ex: &Example, v: &[f64]) -> Result<Vec<f64>> {
    second_order(spec, params, ex, v).map(|(_, c)| c)
}
