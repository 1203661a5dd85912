//! SGD and DP-SGD training loops that record a replayable [`TrainingTape`].
//!
//! One update is
//!
//! ```text
//! w_t = w_{t-1} - lr * (xi_t + sum_{i in S_t} clip(grad_i, c))
//! ```
//!
//! with `xi_t ~ N(0, sigma^2 c^2 I)`. Gradients are summed, not averaged.
//! Non-private SGD is the same update with `sigma = 0` and clipping off.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, AuditError, Result};
use crate::model::{self, Dtype, Example, ModelSpec, ParamVector};
use crate::par;
use crate::rng::{derive_seed, stream, stream_rng};

/// Per-example clipping threshold. `Unclipped` behaves as `c = +inf`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ClipNorm {
    #[default]
    Unclipped,
    Norm(f64),
}

impl ClipNorm {
    pub fn value(self) -> f64 {
        match self {
            ClipNorm::Unclipped => f64::INFINITY,
            ClipNorm::Norm(c) => c,
        }
    }

    pub fn is_clipped(self) -> bool {
        matches!(self, ClipNorm::Norm(_))
    }
}

impl fmt::Display for ClipNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClipNorm::Unclipped => f.write_str("unclipped"),
            ClipNorm::Norm(c) => write!(f, "{c}"),
        }
    }
}

impl Serialize for ClipNorm {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ClipNorm::Unclipped => s.serialize_str("unclipped"),
            ClipNorm::Norm(c) => s.serialize_f64(*c),
        }
    }
}

impl<'de> Deserialize<'de> for ClipNorm {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(c) if c.is_infinite() && c > 0.0 => Ok(ClipNorm::Unclipped),
            Raw::Num(c) => Ok(ClipNorm::Norm(c)),
            Raw::Str(s) if s == "unclipped" => Ok(ClipNorm::Unclipped),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad clip norm {s:?}"))),
        }
    }
}

/// How the index set `S_t` of each step is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Sampling {
    /// Each example is included independently with probability `q`.
    Poisson { q: f64 },
    /// Seeded shuffle per epoch, consecutive minibatches of `batch_size`.
    Shuffled { batch_size: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub steps: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub clip_norm: ClipNorm,
    #[serde(default)]
    pub noise_multiplier: f64,
    pub sampling: Sampling,
    pub seed: u64,
    #[serde(default)]
    pub dtype: Dtype,
    /// Keep every iterate on the tape. When false only `w_l` is retained
    /// (strict last-iterate view) and replay must recompute from `w_0`.
    #[serde(default = "default_true")]
    pub keep_checkpoints: bool,
}

fn default_true() -> bool {
    true
}

impl DpSgdConfig {
    /// Full-batch, noiseless, unclipped configuration.
    pub fn full_batch_gd(steps: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            steps,
            learning_rate,
            clip_norm: ClipNorm::Unclipped,
            noise_multiplier: 0.0,
            sampling: Sampling::Poisson { q: 1.0 },
            seed,
            dtype: Dtype::F64,
            keep_checkpoints: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("training config", "learning_rate must be positive"));
        }
        if let ClipNorm::Norm(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(invalid("training config", "clip_norm must be positive"));
            }
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(invalid("training config", "noise_multiplier must be >= 0"));
        }
        if self.noise_multiplier > 0.0 && !self.clip_norm.is_clipped() {
            return Err(invalid("training config", "noise requires a finite clip_norm"));
        }
        match self.sampling {
            Sampling::Poisson { q } if !(q > 0.0 && q <= 1.0) => {
                Err(invalid("training config", "sampling probability must lie in (0,1]"))
            }
            Sampling::Shuffled { batch_size: 0 } => Err(invalid("training config", "batch_size must be positive")),
            _ => Ok(()),
        }
    }

    /// Seed of the Gaussian noise stream of step `t` (1-based).
    pub fn noise_seed(&self, t: usize) -> u64 {
        derive_seed(self.seed, stream::NOISE, t as u64)
    }
}

/// Non-private minibatch SGD settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: Dtype,
}

impl SgdConfig {
    pub fn to_dpsgd(&self) -> DpSgdConfig {
        DpSgdConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            clip_norm: ClipNorm::Unclipped,
            noise_multiplier: 0.0,
            sampling: Sampling::Shuffled {
                batch_size: self.batch_size,
            },
            seed: self.seed,
            dtype: self.dtype,
            keep_checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Indices into the training set, ascending.
    pub batch: Vec<u32>,
    pub noise_seed: u64,
}

/// Complete record of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTape {
    pub spec: ModelSpec,
    pub config: DpSgdConfig,
    pub init_params: ParamVector,
    /// Ids of the training examples, in training-set order.
    pub example_ids: Vec<u64>,
    pub steps: Vec<StepRecord>,
    /// `w_1 ..= w_l` when checkpoints are kept, otherwise only `w_l`.
    pub checkpoints: Vec<ParamVector>,
}

impl TrainingTape {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// The last iterate `w_l`, the only model an auditor gets to see.
    pub fn final_params(&self) -> &ParamVector {
        self.checkpoints.last().unwrap_or(&self.init_params)
    }

    pub fn has_all_checkpoints(&self) -> bool {
        self.checkpoints.len() == self.steps.len()
    }

    /// Iterate `w_t`, `0 <= t <= l`, if stored.
    pub fn params_at(&self, t: usize) -> Option<&ParamVector> {
        if t == 0 {
            Some(&self.init_params)
        } else if self.has_all_checkpoints() {
            self.checkpoints.get(t - 1)
        } else if t == self.steps.len() {
            self.checkpoints.last()
        } else {
            None
        }
    }

    /// Drop intermediate iterates, keeping `w_0` and `w_l`.
    pub fn purge_intermediate(&mut self) {
        if self.checkpoints.len() > 1 {
            let last = self.checkpoints.pop().expect("nonempty");
            self.checkpoints = vec![last];
        }
        self.config.keep_checkpoints = false;
    }
}

/// `min(1, c / ||g||) * g`.
pub fn clip_gradient(g: &[f64], c: f64) -> Result<Vec<f64>> {
    if !(c > 0.0) {
        return Err(invalid("clip threshold", "must be positive"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(AuditError::NonFinite("gradient"));
    }
    let norm = l2_norm(g);
    if norm <= c {
        return Ok(g.to_vec());
    }
    let scale = c / norm;
    Ok(g.iter().map(|v| v * scale).collect())
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gaussian noise `xi_t` for one step, regenerated from its seed.
pub fn step_noise(noise_seed: u64, dim: usize, std: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * std
        })
        .collect()
}

fn sample_batches(cfg: &DpSgdConfig, n: usize) -> Vec<Vec<u32>> {
    match cfg.sampling {
        Sampling::Poisson { q } => (1..=cfg.steps)
            .map(|t| {
                if q >= 1.0 {
                    return (0..n as u32).collect();
                }
                let mut rng = stream_rng(cfg.seed, stream::SAMPLE, t as u64);
                (0..n as u32).filter(|_| rng.random::<f64>() < q).collect()
            })
            .collect(),
        Sampling::Shuffled { batch_size } => {
            let bs = batch_size.min(n);
            let mut out = Vec::with_capacity(cfg.steps);
            let mut epoch = 0u64;
            let mut order: Vec<u32> = Vec::new();
            let mut pos = n;
            while out.len() < cfg.steps {
                if pos + bs > n {
                    order = (0..n as u32).collect();
                    order.shuffle(&mut stream_rng(cfg.seed, stream::SHUFFLE, epoch));
                    epoch += 1;
                    pos = 0;
                }
                let mut b = order[pos..pos + bs].to_vec();
                b.sort_unstable();
                out.push(b);
                pos += bs;
            }
            out
        }
    }
}

/// One update from `w` on the examples indexed by `batch`.
pub(crate) fn apply_step(
    spec: &ModelSpec,
    cfg: &DpSgdConfig,
    data: &[Example],
    w: &ParamVector,
    batch: &[u32],
    noise_seed: u64,
) -> Result<ParamVector> {
    let d = w.len();
    let c = cfg.clip_norm.value();
    let rows = par::map_slice(batch, |&i| -> Result<Vec<f64>> {
        let g = model::grad_params(spec, w, &data[i as usize])?;
        if cfg.clip_norm.is_clipped() {
            clip_gradient(&g, c)
        } else if g.iter().any(|v| !v.is_finite()) {
            Err(AuditError::NonFinite("gradient"))
        } else {
            Ok(g)
        }
    });
    let mut sum = if cfg.noise_multiplier > 0.0 {
        step_noise(noise_seed, d, cfg.noise_multiplier * c)
    } else {
        vec![0.0; d]
    };
    for row in rows {
        for (s, g) in sum.iter_mut().zip(row?) {
            *s += g;
        }
    }
    let lr = cfg.learning_rate;
    let dtype = w.dtype();
    let next: Vec<f64> = w
        .values()
        .iter()
        .zip(&sum)
        .map(|(p, g)| dtype.round(p - lr * g))
        .collect();
    ParamVector::new(next, dtype)
}

fn check_dataset(spec: &ModelSpec, data: &[Example]) -> Result<()> {
    spec.validate()?;
    if data.is_empty() {
        return Err(invalid("dataset", "must be nonempty"));
    }
    if data.len() > u32::MAX as usize {
        return Err(invalid("dataset", "too many examples"));
    }
    for ex in data {
        ex.validate(spec)?;
    }
    Ok(())
}

/// Train from `init`, recording every step.
pub fn train_from(spec: &ModelSpec, data: &[Example], cfg: &DpSgdConfig, init: ParamVector) -> Result<TrainingTape> {
    cfg.validate()?;
    check_dataset(spec, data)?;
    if init.len() != spec.parameter_count() {
        return Err(AuditError::DimensionMismatch {
            what: "initial parameters",
            expected: spec.parameter_count(),
            got: init.len(),
        });
    }
    let init = ParamVector::new(init.into_values(), cfg.dtype)?;
    let batches = sample_batches(cfg, data.len());
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut checkpoints = Vec::with_capacity(if cfg.keep_checkpoints { cfg.steps } else { 1 });
    let mut w = init.clone();
    for (t, batch) in (1..=cfg.steps).zip(batches) {
        let noise_seed = cfg.noise_seed(t);
        w = match apply_step(spec, cfg, data, &w, &batch, noise_seed) {
            Ok(next) => next,
            Err(AuditError::NonFinite(_)) => return Err(AuditError::Diverged { step: t }),
            Err(e) => return Err(e),
        };
        steps.push(StepRecord { batch, noise_seed });
        if cfg.keep_checkpoints {
            checkpoints.push(w.clone());
        }
    }
    if !cfg.keep_checkpoints && cfg.steps > 0 {
        checkpoints.push(w);
    }
    Ok(TrainingTape {
        spec: *spec,
        config: cfg.clone(),
        init_params: init,
        example_ids: data.iter().map(|e| e.id).collect(),
        steps,
        checkpoints,
    })
}

/// DP-SGD with a fresh initialization drawn from the config seed.
pub fn dpsgd_train(spec: &ModelSpec, data: &[Example], cfg: &DpSgdConfig) -> Result<TrainingTape> {
    let init = spec.init_params(derive_seed(cfg.seed, stream::INIT, 0), cfg.dtype);
    train_from(spec, data, cfg, init)
}

/// Non-private minibatch SGD.
pub fn sgd_train(spec: &ModelSpec, data: &[Example], cfg: &SgdConfig) -> Result<TrainingTape> {
    dpsgd_train(spec, data, &cfg.to_dpsgd())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayedStep {
    pub before: ParamVector,
    pub after: ParamVector,
    pub batch: Vec<u32>,
    /// `xi_t`, empty when the run was noiseless.
    pub noise: Vec<f64>,
}

/// Recompute step `t` (1-based) and check it against the stored checkpoint.
pub fn replay_step(tape: &TrainingTape, data: &[Example], t: usize) -> Result<ReplayedStep> {
    let steps = tape.num_steps();
    if t == 0 || t > steps {
        return Err(AuditError::StepOutOfRange { step: t, steps });
    }
    check_tape_data(tape, data)?;
    let before = match tape.params_at(t - 1) {
        Some(w) => w.clone(),
        None => {
            let mut w = tape.init_params.clone();
            for s in 1..t {
                let rec = &tape.steps[s - 1];
                w = apply_step(&tape.spec, &tape.config, data, &w, &rec.batch, rec.noise_seed)?;
            }
            w
        }
    };
    let rec = &tape.steps[t - 1];
    let after = apply_step(&tape.spec, &tape.config, data, &before, &rec.batch, rec.noise_seed)?;
    if let Some(stored) = tape.params_at(t) {
        let same = stored
            .values()
            .iter()
            .zip(after.values())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same || stored.len() != after.len() {
            return Err(AuditError::ReplayMismatch { step: t });
        }
    }
    let noise = if tape.config.noise_multiplier > 0.0 {
        step_noise(
            rec.noise_seed,
            before.len(),
            tape.config.noise_multiplier * tape.config.clip_norm.value(),
        )
    } else {
        Vec::new()
    };
    Ok(ReplayedStep {
        before,
        after,
        batch: rec.batch.clone(),
        noise,
    })
}

pub(crate) fn check_tape_data(tape: &TrainingTape, data: &[Example]) -> Result<()> {
    if data.len() != tape.example_ids.len() || data.iter().zip(&tape.example_ids).any(|(e, &id)| e.id != id) {
        return Err(AuditError::TapeMismatch("training set does not match the tape".into()));
    }
    Ok(())
}
