//! Experiment configuration (TOML).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::epsilon::{Budget, Procedure};
use crate::error::{invalid, AuditError, Result};
use crate::harness::data::DatasetSpec;
use crate::metacanary::{hex_digest, CanaryInit, MetaConfig};
use crate::model::{Dtype, ModelSpec};
use crate::trainer::{ClipNorm, DpSgdConfig, Sampling, SgdConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CanaryType {
    /// Held-out examples with their true labels.
    Random,
    /// Held-out examples with a wrong label.
    Mislabeled,
    /// Optimized by metagradient descent.
    Metagradient,
}

impl CanaryType {
    pub fn as_str(self) -> &'static str {
        match self {
            CanaryType::Random => "random",
            CanaryType::Mislabeled => "mislabeled",
            CanaryType::Metagradient => "metagradient",
        }
    }
}

impl fmt::Display for CanaryType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CanaryType {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(CanaryType::Random),
            "mislabeled" => Ok(CanaryType::Mislabeled),
            "metagradient" => Ok(CanaryType::Metagradient),
            other => Err(invalid("canary type", format!("unknown {other:?}"))),
        }
    }
}

/// Which guessing games to play.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcedureChoice {
    Steinke,
    Pairs,
    #[default]
    Both,
}

impl ProcedureChoice {
    pub fn procedures(self) -> Vec<Procedure> {
        match self {
            ProcedureChoice::Steinke => vec![Procedure::Steinke],
            ProcedureChoice::Pairs => vec![Procedure::Pairs],
            ProcedureChoice::Both => vec![Procedure::Steinke, Procedure::Pairs],
        }
    }
}

impl FromStr for ProcedureChoice {
    type Err = AuditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(ProcedureChoice::Both),
            other => match other.parse::<Procedure>()? {
                Procedure::Steinke => Ok(ProcedureChoice::Steinke),
                Procedure::Pairs => Ok(ProcedureChoice::Pairs),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub source: DatasetSpec,
    #[serde(default)]
    pub seed: u64,
    /// Examples reserved for drawing random and mislabeled canaries.
    pub heldout: usize,
    /// Examples reserved for non-private pretraining.
    #[serde(default)]
    pub pretrain: usize,
}

/// Non-private pretraining for the fine-tuning mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

/// How the audited model is trained. The per-run seed is supplied at run
/// time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TrainingPlan {
    Sgd {
        steps: usize,
        learning_rate: f64,
        batch_size: usize,
        #[serde(default)]
        dtype: Dtype,
    },
    Dpsgd {
        steps: usize,
        learning_rate: f64,
        clip_norm: ClipNorm,
        noise_multiplier: f64,
        sampling: Sampling,
        #[serde(default)]
        dtype: Dtype,
    },
    /// Pretrain non-privately on the pretraining pool, then DP-SGD from the
    /// pretrained weights.
    DpFinetune {
        pretrain: PretrainConfig,
        steps: usize,
        learning_rate: f64,
        clip_norm: ClipNorm,
        noise_multiplier: f64,
        sampling: Sampling,
        #[serde(default)]
        dtype: Dtype,
    },
}

impl TrainingPlan {
    pub fn steps(&self) -> usize {
        match self {
            TrainingPlan::Sgd { steps, .. }
            | TrainingPlan::Dpsgd { steps, .. }
            | TrainingPlan::DpFinetune { steps, .. } => *steps,
        }
    }

    pub fn is_private(&self) -> bool {
        !matches!(self, TrainingPlan::Sgd { .. })
    }

    /// Trainer configuration for one run.
    pub fn trainer_config(&self, seed: u64) -> DpSgdConfig {
        match self {
            TrainingPlan::Sgd {
                steps,
                learning_rate,
                batch_size,
                dtype,
            } => SgdConfig {
                steps: *steps,
                learning_rate: *learning_rate,
                batch_size: *batch_size,
                seed,
                dtype: *dtype,
            }
            .to_dpsgd(),
            TrainingPlan::Dpsgd {
                steps,
                learning_rate,
                clip_norm,
                noise_multiplier,
                sampling,
                dtype,
            }
            | TrainingPlan::DpFinetune {
                steps,
                learning_rate,
                clip_norm,
                noise_multiplier,
                sampling,
                dtype,
                ..
            } => DpSgdConfig {
                steps: *steps,
                learning_rate: *learning_rate,
                clip_norm: *clip_norm,
                noise_multiplier: *noise_multiplier,
                sampling: *sampling,
                seed,
                dtype: *dtype,
                keep_checkpoints: true,
            },
        }
    }

    pub fn pretrain(&self) -> Option<SgdConfig> {
        match self {
            TrainingPlan::DpFinetune { pretrain, dtype, .. } => Some(SgdConfig {
                steps: pretrain.steps,
                learning_rate: pretrain.learning_rate,
                batch_size: pretrain.batch_size,
                seed: pretrain.seed,
                dtype: *dtype,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    /// Canary count `m`; even.
    pub canaries: usize,
    pub canary_type: CanaryType,
    #[serde(default)]
    pub procedure: ProcedureChoice,
    pub k_pos: usize,
    pub k_neg: usize,
    /// Guessed pairs in the paired game.
    pub pairs_k: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub delta: f64,
    /// Drives the draw of random and mislabeled canaries.
    #[serde(default)]
    pub canary_seed: u64,
    /// Load canaries from a canary container instead of building them.
    #[serde(default)]
    pub canary_file: Option<PathBuf>,
}

fn default_tau() -> f64 {
    0.05
}

impl AuditConfig {
    pub fn budget(&self, procedure: Procedure) -> Budget {
        match procedure {
            Procedure::Steinke => Budget::Steinke {
                k_pos: self.k_pos,
                k_neg: self.k_neg,
            },
            Procedure::Pairs => Budget::Pairs { k: self.pairs_k },
        }
    }

    pub fn canary_init(&self) -> Option<CanaryInit> {
        match self.canary_type {
            CanaryType::Random => Some(CanaryInit::Clean),
            CanaryType::Mislabeled => Some(CanaryInit::Mislabeled),
            CanaryType::Metagradient => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    /// Audit every `every` steps, from step 0 to the last step.
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Also write each run's training tape.
    #[serde(default)]
    pub save_tapes: bool,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub training: TrainingPlan,
    #[serde(default)]
    pub meta: Option<MetaConfig>,
    pub audit: AuditConfig,
    #[serde(default)]
    pub curve: Option<CurveConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AuditError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| AuditError::Config(e.to_string()))
    }

    /// Hex SHA-256 of the canonical JSON form. The output directory is
    /// not part of the experiment and is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(invalid("experiment config", "seed list is empty"));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("experiment config", "duplicate seeds"));
        }
        self.dataset.source.validate()?;
        self.model.validate()?;
        let (d, k) = (self.dataset.source.input_dim(), self.dataset.source.num_classes());
        if self.model.input_dim() != d || self.model.num_classes() != k {
            return Err(invalid(
                "experiment config",
                format!(
                    "model is {}->{} but the dataset is {d}->{k}",
                    self.model.input_dim(),
                    self.model.num_classes()
                ),
            ));
        }
        self.training.trainer_config(0).validate()?;
        if let Some(p) = self.training.pretrain() {
            p.to_dpsgd().validate()?;
            if self.dataset.pretrain == 0 {
                return Err(invalid("experiment config", "fine-tuning needs a pretraining pool"));
            }
        }
        if let Some(meta) = &self.meta {
            meta.validate()?;
            meta.inner.to_dpsgd().validate()?;
        }
        let a = &self.audit;
        if a.canaries == 0 || !a.canaries.is_multiple_of(2) {
            return Err(invalid("audit config", "canary count must be positive and even"));
        }
        if a.k_pos + a.k_neg > a.canaries {
            return Err(AuditError::BudgetExceeded {
                budget: a.k_pos + a.k_neg,
                available: a.canaries,
            });
        }
        if a.pairs_k > a.canaries / 2 {
            return Err(AuditError::BudgetExceeded {
                budget: a.pairs_k,
                available: a.canaries / 2,
            });
        }
        if !(a.tau > 0.0 && a.tau < 1.0) || !(0.0..1.0).contains(&a.delta) {
            return Err(invalid("audit config", "need 0 < tau < 1 and 0 <= delta < 1"));
        }
        if a.canary_type == CanaryType::Metagradient && self.meta.is_none() && a.canary_file.is_none() {
            return Err(invalid(
                "audit config",
                "metagradient canaries need [meta] or canary_file",
            ));
        }
        if a.canary_file.is_none() && a.canary_type != CanaryType::Metagradient && self.dataset.heldout < a.canaries {
            return Err(invalid(
                "audit config",
                "held-out pool is smaller than the canary count",
            ));
        }
        if let Some(c) = &self.curve {
            if c.every == 0 {
                return Err(invalid("curve config", "every must be >= 1"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = r#"
seeds = [1, 2, 3]

[dataset]
seed = 5
heldout = 40

[dataset.source]
kind = "synthetic-gaussians"
classes = 3
dim = 4
per_class = 50
spread = 0.1

[model]
kind = "mlp1"
input_dim = 4
num_classes = 3
hidden_dim = 8
activation = "tanh"

[training]
mode = "dpsgd"
steps = 20
learning_rate = 0.05
clip_norm = 1.0
noise_multiplier = 0.8
sampling = { kind = "poisson", q = 0.2 }

[audit]
canaries = 20
canary_type = "mislabeled"
k_pos = 4
k_neg = 4
pairs_k = 5
delta = 1e-5
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.audit.tau, 0.05);
        assert_eq!(cfg.audit.procedure, ProcedureChoice::Both);
        assert_eq!(cfg.training.trainer_config(9).clip_norm, ClipNorm::Norm(1.0));
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let mut other = cfg.clone();
        other.out_dir = Some("elsewhere".into());
        assert_eq!(other.hash(), cfg.hash());
        other.seeds.push(4);
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let bad = [
            SAMPLE.replace("seeds = [1, 2, 3]", "seeds = []"),
            SAMPLE.replace("seeds = [1, 2, 3]", "seeds = [1, 1]"),
            SAMPLE.replace("input_dim = 4", "input_dim = 5"),
            SAMPLE.replace("canaries = 20", "canaries = 21"),
            SAMPLE.replace("pairs_k = 5", "pairs_k = 11"),
            SAMPLE.replace("canary_type = \"mislabeled\"", "canary_type = \"metagradient\""),
            SAMPLE.replace("heldout = 40", "heldout = 10"),
            SAMPLE.replace("clip_norm = 1.0", "clip_norm = \"unclipped\""),
            SAMPLE.replace("kind = \"poisson\"", "kind = \"nope\""),
        ];
        for text in bad {
            assert!(ExperimentConfig::from_toml(&text).is_err(), "{text}");
        }
    }

    #[test]
    fn choices_parse() {
        assert_eq!("both".parse::<ProcedureChoice>().unwrap().procedures().len(), 2);
        assert_eq!("pairs".parse::<ProcedureChoice>().unwrap(), ProcedureChoice::Pairs);
        assert_eq!("metagradient".parse::<CanaryType>().unwrap(), CanaryType::Metagradient);
        assert!("x".parse::<CanaryType>().is_err());
    }
}
