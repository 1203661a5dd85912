//! Canary optimization by metagradient descent.
//!
//! The objective is the IN/OUT loss gap on the final model,
//!
//! ```text
//! phi(w) = sum_{i in IN} L(w, z_i) - sum_{i in OUT} L(w, z_i)
//! ```
//!
//! and its gradient with respect to the canary pixels is taken through the
//! whole training run by reverse unrolling of the recorded tape. For one step
//! `w_t = w_{t-1} - lr * (xi_t + sum_{j in S_t} clip(g_j))` the adjoint
//! update is
//!
//! ```text
//! a_{t-1} = a_t - lr * sum_j H_j J_j a_t
//! dz_j   -= lr * (d2L/dw dz_j)^T J_j a_t        for canaries j in S_t
//! ```
//!
//! where `J_j` is the (symmetric) Jacobian of clipping at `g_j`.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{read_container, write_container, CANARY_MAGIC};
use crate::error::{invalid, AuditError, Result};
use crate::game::{split_canaries, Split};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::par;
use crate::rng::{derive_seed, stream, stream_rng};
use crate::trainer::{self, l2_norm, SgdConfig, TrainingTape};

/// Canary features, labels and ids, plus an optional IN/OUT assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CanarySet {
    /// `m x input_dim`, entries in `[0, 1]`.
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
    #[serde(default)]
    pub assignment: Option<Split>,
}

impl CanarySet {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        let m = features.len();
        if labels.len() != m || ids.len() != m {
            return Err(invalid("canary set", "features, labels and ids must have equal length"));
        }
        if !m.is_multiple_of(2) {
            return Err(invalid("canary set", "canary count must be even"));
        }
        Ok(Self {
            features,
            labels,
            ids,
            assignment: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn with_assignment(mut self, split: Split) -> Result<Self> {
        if split.len() != self.len() {
            return Err(AuditError::DimensionMismatch {
                what: "canary assignment",
                expected: self.len(),
                got: split.len(),
            });
        }
        self.assignment = Some(split);
        Ok(self)
    }

    pub fn example(&self, i: usize) -> Example {
        Example::canary(self.ids[i], self.features[i].clone(), self.labels[i])
    }

    pub fn examples(&self) -> Vec<Example> {
        (0..self.len()).map(|i| self.example(i)).collect()
    }

    /// Canaries currently assigned IN.
    pub fn in_examples(&self) -> Result<Vec<Example>> {
        let split = self.assignment.as_ref().ok_or(AuditError::MissingAssignment)?;
        Ok(split.in_indices().into_iter().map(|i| self.example(i)).collect())
    }

    /// Clamp every pixel into `[0, 1]`.
    pub fn project(&mut self) {
        for row in &mut self.features {
            for v in row.iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    /// Round pixels to `f32`, the storage precision of the container.
    pub fn quantize_f32(&mut self) {
        for row in &mut self.features {
            for v in row.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for i in 0..self.len() {
            self.example(i).validate(spec)?;
        }
        Ok(())
    }
}

/// `sum_{IN} L(w, z_i) - sum_{OUT} L(w, z_i)`.
pub fn surrogate_phi(spec: &ModelSpec, w: &ParamVector, canaries: &CanarySet) -> Result<f64> {
    let split = canaries.assignment.as_ref().ok_or(AuditError::MissingAssignment)?;
    let mut phi = 0.0;
    for i in 0..canaries.len() {
        let l = model::loss(spec, w, &canaries.example(i))?;
        phi += if split.is_in(i) { l } else { -l };
    }
    Ok(phi)
}

/// Jacobian-vector product of `g -> min(1, c/||g||) g`.
///
/// On the boundary `||g|| = c` the interior (identity) branch is used.
pub fn clip_jvp(g: &[f64], c: f64, v: &[f64]) -> Vec<f64> {
    let norm = l2_norm(g);
    if !(norm > c) {
        return v.to_vec();
    }
    let gv: f64 = g.iter().zip(v).map(|(a, b)| a * b).sum();
    let s = c / norm;
    let k = gv / (norm * norm);
    v.iter().zip(g).map(|(vi, gi)| s * (vi - gi * k)).collect()
}

/// Gradient of `phi(A(z))` with respect to every canary pixel.
///
/// `data` must be the exact training set recorded in `tape` (normally
/// `D ∪ C_IN`), and `canaries` must carry the assignment used to build it.
pub fn metagradient(
    tape: &TrainingTape,
    data: &[Example],
    canaries: &CanarySet,
    spec: &ModelSpec,
) -> Result<Vec<Vec<f64>>> {
    if *spec != tape.spec {
        return Err(AuditError::TapeMismatch("model spec differs from the tape".into()));
    }
    trainer::check_tape_data(tape, data)?;
    let split = canaries.assignment.as_ref().ok_or(AuditError::MissingAssignment)?;
    let index_of: HashMap<u64, usize> = canaries.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut seen = vec![false; canaries.len()];
    for ex in data {
        if let Some(&ci) = index_of.get(&ex.id) {
            if !split.is_in(ci) {
                return Err(AuditError::TapeMismatch(format!(
                    "OUT canary {} is in the training set",
                    ex.id
                )));
            }
            if ex.features != canaries.features[ci] || ex.label != canaries.labels[ci] {
                return Err(AuditError::TapeMismatch(format!(
                    "canary {} differs from the trained copy",
                    ex.id
                )));
            }
            seen[ci] = true;
        }
    }
    if let Some(i) = (0..canaries.len()).find(|&i| split.is_in(i) && !seen[i]) {
        return Err(AuditError::TapeMismatch(format!(
            "IN canary {} missing from the training set",
            canaries.ids[i]
        )));
    }
    // canary index of every training example, if any
    let canary_slot: Vec<Option<usize>> = data.iter().map(|e| index_of.get(&e.id).copied()).collect();

    let cfg = &tape.config;
    let lr = cfg.learning_rate;
    let clip = cfg.clip_norm;
    let iterates = all_iterates(tape, data)?;
    let w_final = iterates.last().expect("w_0 always present");

    // direct term and initial adjoint
    let mut grads = Vec::with_capacity(canaries.len());
    let mut adjoint = vec![0.0; w_final.len()];
    for i in 0..canaries.len() {
        let ex = canaries.example(i);
        let sign = if split.is_in(i) { 1.0 } else { -1.0 };
        let gx = model::grad_input(spec, w_final, &ex)?;
        grads.push(gx.into_iter().map(|v| sign * v).collect::<Vec<f64>>());
        let gw = model::grad_params(spec, w_final, &ex)?;
        for (a, g) in adjoint.iter_mut().zip(gw) {
            *a += sign * g;
        }
    }

    for t in (1..=tape.num_steps()).rev() {
        let w = &iterates[t - 1];
        let batch = &tape.steps[t - 1].batch;
        let a = &adjoint;
        let rows = par::map_slice(batch, |&j| -> Result<(Vec<f64>, Vec<f64>)> {
            let ex = &data[j as usize];
            let u = if clip.is_clipped() {
                let g = model::grad_params(spec, w, ex)?;
                clip_jvp(&g, clip.value(), a)
            } else {
                a.clone()
            };
            model::second_order(spec, w, ex, &u)
        });
        let mut next = adjoint.clone();
        for (&j, row) in batch.iter().zip(rows) {
            let (hvp, cross) = row?;
            for (n, h) in next.iter_mut().zip(&hvp) {
                *n -= lr * h;
            }
            if let Some(ci) = canary_slot[j as usize] {
                for (g, c) in grads[ci].iter_mut().zip(&cross) {
                    *g -= lr * c;
                }
            }
        }
        adjoint = next;
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(AuditError::NonFinite("metagradient"));
    }
    Ok(grads)
}

fn all_iterates(tape: &TrainingTape, data: &[Example]) -> Result<Vec<ParamVector>> {
    let mut out = Vec::with_capacity(tape.num_steps() + 1);
    out.push(tape.init_params.clone());
    if tape.has_all_checkpoints() {
        out.extend(tape.checkpoints.iter().cloned());
        return Ok(out);
    }
    for t in 1..=tape.num_steps() {
        out.push(trainer::replay_step(tape, data, t)?.after);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CanaryOptimizer {
    /// Adaptive moment estimates (Adam) on the metagradient.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// `z -= step * sign(grad)`.
    Sign,
}

impl Default for CanaryOptimizer {
    fn default() -> Self {
        CanaryOptimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanaryInit {
    /// Real examples with a freshly drawn wrong label.
    #[default]
    Mislabeled,
    /// Uniform noise pixels with random labels.
    UniformNoise,
    /// Real examples with their own labels.
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaConfig {
    pub metasteps: usize,
    pub step_size: f64,
    #[serde(default)]
    pub optimizer: CanaryOptimizer,
    #[serde(default)]
    pub init: CanaryInit,
    /// Inner non-private training; its seed is replaced every metastep.
    pub inner: SgdConfig,
    pub seed: u64,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.metasteps == 0 {
            return Err(invalid("meta config", "metasteps must be >= 1"));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(invalid("meta config", "step_size must be >= 0"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex_digest(&json)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed of metastep `i`: drives the split, model init and data order.
pub fn metastep_seed(meta_seed: u64, i: usize) -> u64 {
    derive_seed(meta_seed, stream::METASTEP, i as u64)
}

/// Draw `m` starting canaries from `pool`.
pub fn init_canaries(
    pool: &[Example],
    spec: &ModelSpec,
    m: usize,
    init: CanaryInit,
    first_id: u64,
    seed: u64,
) -> Result<CanarySet> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(invalid("canary count", "must be positive and even"));
    }
    let k = spec.num_classes();
    let d = spec.input_dim();
    let mut rng = stream_rng(seed, stream::CANARY_INIT, 0);
    let mut features = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    match init {
        CanaryInit::Mislabeled | CanaryInit::Clean => {
            if pool.len() < m {
                return Err(invalid(
                    "canary pool",
                    format!("need {m} examples, have {}", pool.len()),
                ));
            }
            for ex in pool.choose_multiple(&mut rng, m) {
                let label = if init == CanaryInit::Mislabeled {
                    (ex.label + rng.random_range(1..k)) % k
                } else {
                    ex.label
                };
                features.push(ex.features.clone());
                labels.push(label);
            }
        }
        CanaryInit::UniformNoise => {
            for _ in 0..m {
                features.push((0..d).map(|_| rng.random::<f64>()).collect());
                labels.push(rng.random_range(0..k));
            }
        }
    }
    let ids = (0..m as u64).map(|i| first_id + i).collect();
    CanarySet::new(features, labels, ids)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaResult {
    pub canaries: CanarySet,
    /// `phi` at each metastep, before the update.
    pub phi_log: Vec<f64>,
}

/// Run `cfg.metasteps` rounds of: fresh split, train on `D ∪ C_IN`,
/// metagradient of `phi`, optimizer step, projection to `[0, 1]`.
pub fn optimize_canaries_from(
    data: &[Example],
    spec: &ModelSpec,
    cfg: &MetaConfig,
    start: CanarySet,
) -> Result<MetaResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("dataset", "must be nonempty"));
    }
    start.validate(spec)?;
    let m = start.len();
    if m == 0 || !m.is_multiple_of(2) {
        return Err(invalid("canary count", "must be positive and even"));
    }
    let mut canaries = start;
    let d = canaries.input_dim();
    let mut first = vec![vec![0.0; d]; m];
    let mut second = vec![vec![0.0; d]; m];
    let mut phi_log = Vec::with_capacity(cfg.metasteps);
    for step in 0..cfg.metasteps {
        let seed = metastep_seed(cfg.seed, step);
        let split = split_canaries(m, seed)?;
        canaries = canaries.with_assignment(split)?;
        let mut train = data.to_vec();
        train.extend(canaries.in_examples()?);
        let inner = SgdConfig {
            seed,
            ..cfg.inner.clone()
        };
        let tape = trainer::sgd_train(spec, &train, &inner).map_err(|e| match e {
            AuditError::Diverged { step: inner_step } => AuditError::Invalid {
                what: "canary optimization",
                reason: format!("inner training diverged at metastep {step}, step {inner_step}"),
            },
            other => other,
        })?;
        phi_log.push(surrogate_phi(spec, tape.final_params(), &canaries)?);
        let grad = metagradient(&tape, &train, &canaries, spec)?;
        let t = (step + 1) as i32;
        for i in 0..m {
            for j in 0..d {
                let g = grad[i][j];
                let delta = match cfg.optimizer {
                    CanaryOptimizer::Adam { beta1, beta2, eps } => {
                        first[i][j] = beta1 * first[i][j] + (1.0 - beta1) * g;
                        second[i][j] = beta2 * second[i][j] + (1.0 - beta2) * g * g;
                        let mh = first[i][j] / (1.0 - beta1.powi(t));
                        let vh = second[i][j] / (1.0 - beta2.powi(t));
                        mh / (vh.sqrt() + eps)
                    }
                    CanaryOptimizer::Sign => {
                        if g > 0.0 {
                            1.0
                        } else if g < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                };
                canaries.features[i][j] -= cfg.step_size * delta;
            }
        }
        canaries.project();
    }
    canaries.assignment = None;
    Ok(MetaResult { canaries, phi_log })
}

/// [`optimize_canaries_from`] starting from canaries drawn out of `data`.
pub fn optimize_canaries(
    data: &[Example],
    spec: &ModelSpec,
    cfg: &MetaConfig,
    m: usize,
    first_id: u64,
) -> Result<MetaResult> {
    let start = init_canaries(data, spec, m, cfg.init, first_id, cfg.seed)?;
    optimize_canaries_from(data, spec, cfg, start)
}

/// Provenance stored alongside persisted canaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub meta_config_hash: String,
    pub metasteps: usize,
    /// `random`, `mislabeled` or `metagradient`.
    pub kind: String,
}

#[derive(Serialize, Deserialize)]
struct CanaryHeader {
    format: u32,
    m: usize,
    input_dim: usize,
    labels: Vec<usize>,
    ids: Vec<u64>,
    provenance: Provenance,
}

/// Container: JSON header (m, input_dim, labels, ids, provenance) followed
/// by the `m x input_dim` pixel matrix as little-endian f32, row-major.
pub fn write_canaries<W: Write>(w: W, canaries: &CanarySet, provenance: &Provenance) -> Result<()> {
    let header = CanaryHeader {
        format: 1,
        m: canaries.len(),
        input_dim: canaries.input_dim(),
        labels: canaries.labels.clone(),
        ids: canaries.ids.clone(),
        provenance: provenance.clone(),
    };
    let mut buf = Vec::with_capacity(canaries.len() * canaries.input_dim() * 4);
    for row in &canaries.features {
        if row.len() != header.input_dim {
            return Err(invalid("canary set", "ragged feature matrix"));
        }
        for &v in row {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_container(w, CANARY_MAGIC, &header, &buf)
}

pub fn read_canaries<R: Read>(r: R) -> Result<(CanarySet, Provenance)> {
    let (h, mut p): (CanaryHeader, _) = read_container(r, CANARY_MAGIC, "canary file")?;
    if h.labels.len() != h.m || h.ids.len() != h.m {
        return Err(AuditError::Malformed {
            what: "canary file",
            offset: 12,
            reason: "label/id count does not match m".into(),
        });
    }
    let mut features = Vec::with_capacity(h.m);
    for _ in 0..h.m {
        features.push(
            (0..h.input_dim)
                .map(|_| p.f32().map(f64::from))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    p.finish()?;
    Ok((CanarySet::new(features, h.labels, h.ids)?, h.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, Dtype};
    use approx::assert_relative_eq;

    #[test]
    fn clip_jvp_examples() {
        assert_eq!(clip_jvp(&[0.3, 0.4], 1.0, &[2.0, -1.0]), vec![2.0, -1.0]);
        let v = clip_jvp(&[5.0, 0.0], 1.0, &[0.0, 1.0]);
        assert_relative_eq!(v[0], 0.0);
        assert_relative_eq!(v[1], 0.2, epsilon = 1e-15);
        let v = clip_jvp(&[5.0, 0.0], 1.0, &[1.0, 0.0]);
        assert_relative_eq!(v[0], 0.0, epsilon = 1e-15);
        assert_relative_eq!(v[1], 0.0);
        // boundary uses the identity branch
        assert_eq!(clip_jvp(&[3.0, 4.0], 5.0, &[1.0, 2.0]), vec![1.0, 2.0]);
    }

    fn set(m: usize, d: usize) -> CanarySet {
        let f = (0..m)
            .map(|i| (0..d).map(|j| ((i * 7 + j * 3) % 10) as f64 / 10.0).collect())
            .collect();
        CanarySet::new(
            f,
            (0..m).map(|i| i % 2).collect(),
            (0..m as u64).map(|i| 1000 + i).collect(),
        )
        .unwrap()
    }

    #[test]
    fn phi_needs_assignment_and_is_antisymmetric() {
        let spec = ModelSpec::mlp1(3, 2, 4, Activation::Tanh);
        let w = spec.init_params(1, Dtype::F64);
        let c = set(4, 3);
        assert!(matches!(
            surrogate_phi(&spec, &w, &c),
            Err(AuditError::MissingAssignment)
        ));
        let split = split_canaries(4, 2).unwrap();
        let a = surrogate_phi(&spec, &w, &c.clone().with_assignment(split.clone()).unwrap()).unwrap();
        let b = surrogate_phi(&spec, &w, &c.with_assignment(split.swapped()).unwrap()).unwrap();
        assert_relative_eq!(a, -b, epsilon = 1e-14);
    }

    #[test]
    fn phi_is_zero_for_identical_canaries() {
        let spec = ModelSpec::logreg(2, 2);
        let w = spec.init_params(5, Dtype::F64);
        let c = CanarySet::new(vec![vec![0.3, 0.6]; 4], vec![1; 4], vec![1, 2, 3, 4]).unwrap();
        let c = c.with_assignment(split_canaries(4, 0).unwrap()).unwrap();
        assert_eq!(surrogate_phi(&spec, &w, &c).unwrap(), 0.0);
    }

    #[test]
    fn canary_file_round_trip() {
        let mut c = set(6, 5);
        c.quantize_f32();
        let prov = Provenance {
            meta_config_hash: "abc".into(),
            metasteps: 3,
            kind: "metagradient".into(),
        };
        let mut buf = Vec::new();
        write_canaries(&mut buf, &c, &prov).unwrap();
        let (back, p) = read_canaries(&buf[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(p, prov);
        let mut again = Vec::new();
        write_canaries(&mut again, &back, &p).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn init_mislabels() {
        let spec = ModelSpec::logreg(2, 3);
        let pool: Vec<Example> = (0..10)
            .map(|i| Example::new(i, vec![i as f64 / 10.0, 0.5], (i % 3) as usize))
            .collect();
        let source = |f: &[f64]| pool.iter().find(|e| e.features == f).unwrap().label;
        let c = init_canaries(&pool, &spec, 6, CanaryInit::Mislabeled, 500, 1).unwrap();
        assert_eq!(c.ids, (500..506).collect::<Vec<_>>());
        for i in 0..6 {
            assert!(c.labels[i] < 3);
            assert_ne!(c.labels[i], source(&c.features[i]));
        }
        let clean = init_canaries(&pool, &spec, 6, CanaryInit::Clean, 500, 1).unwrap();
        for i in 0..6 {
            assert_eq!(clean.labels[i], source(&clean.features[i]));
        }
        let u = init_canaries(&[], &spec, 4, CanaryInit::UniformNoise, 0, 1).unwrap();
        assert!(u.features.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        assert!(init_canaries(&pool, &spec, 12, CanaryInit::Mislabeled, 0, 1).is_err());
    }
}
