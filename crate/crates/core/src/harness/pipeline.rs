//! End-to-end audit runs: build canaries, train on `D ∪ C_IN` once per
//! seed, play the guessing games on the last iterate, aggregate.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::epsilon::{EpsilonEstimate, Procedure};
use crate::error::{invalid, AuditError, Result};
use crate::game::{run_audit_game, split_canaries, GuessRecord};
use crate::harness::config::{CanaryType, ExperimentConfig};
use crate::harness::data::{partition, synth_dataset, Partition};
use crate::metacanary::{self, init_canaries, CanarySet, MetaResult, Provenance};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::par;
use crate::tapefile::write_tape;
use crate::trainer::{self, TrainingTape};

/// Everything shared by the seeds of one experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub data: Partition,
    /// Canaries without an assignment.
    pub canaries: CanarySet,
    pub provenance: Provenance,
    /// Pretrained starting point for the fine-tuning mode.
    pub init: Option<ParamVector>,
}

/// Build the dataset, the canaries and (in fine-tuning mode) the pretrained
/// weights.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let data = build_partition(cfg)?;
    let (canaries, provenance) = build_canaries(cfg, &data)?;
    prepare_with(cfg, data, canaries, provenance)
}

/// [`prepare`] with canaries supplied by the caller.
pub fn prepare_with(
    cfg: &ExperimentConfig,
    data: Partition,
    canaries: CanarySet,
    provenance: Provenance,
) -> Result<Prepared> {
    check_canaries(cfg, &data, &canaries)?;
    let init = match cfg.training.pretrain() {
        Some(p) => Some(
            trainer::sgd_train(&cfg.model, &data.pretrain, &p)?
                .final_params()
                .clone(),
        ),
        None => None,
    };
    Ok(Prepared {
        data,
        canaries,
        provenance,
        init,
    })
}

/// Dataset partition for `cfg`, without canaries.
pub fn build_partition(cfg: &ExperimentConfig) -> Result<Partition> {
    let raw = synth_dataset(&cfg.dataset.source, cfg.dataset.seed)?;
    partition(raw, cfg.dataset.heldout, cfg.dataset.pretrain, cfg.dataset.seed)
}

/// Load, draw or optimize the canary set. Pixels are rounded to f32 so
/// that a saved set reproduces the in-memory one exactly.
pub fn build_canaries(cfg: &ExperimentConfig, data: &Partition) -> Result<(CanarySet, Provenance)> {
    let a = &cfg.audit;
    if let Some(path) = &a.canary_file {
        return metacanary::read_canaries(File::open(path)?);
    }
    let (mut canaries, provenance) = match (a.canary_type, a.canary_init()) {
        (_, Some(init)) => {
            let c = init_canaries(&data.heldout, &cfg.model, a.canaries, init, data.next_id, a.canary_seed)?;
            let p = Provenance {
                kind: a.canary_type.to_string(),
                ..Provenance::default()
            };
            (c, p)
        }
        (CanaryType::Metagradient, None) => {
            let (out, p) = optimize_metagradient(cfg, data)?;
            (out.canaries, p)
        }
        (t, None) => return Err(invalid("canary type", format!("{t} has no builder"))),
    };
    canaries.quantize_f32();
    Ok((canaries, provenance))
}

/// Metagradient canaries for `cfg`, started from mislabeled (or noise)
/// held-out examples and optimized against the training data `D`.
pub fn optimize_metagradient(cfg: &ExperimentConfig, data: &Partition) -> Result<(MetaResult, Provenance)> {
    let meta = cfg
        .meta
        .as_ref()
        .ok_or_else(|| invalid("audit config", "metagradient canaries need [meta]"))?;
    let start = init_canaries(
        &data.heldout,
        &cfg.model,
        cfg.audit.canaries,
        meta.init,
        data.next_id,
        meta.seed,
    )?;
    let mut out = metacanary::optimize_canaries_from(&data.train, &cfg.model, meta, start)?;
    out.canaries.quantize_f32();
    let p = Provenance {
        meta_config_hash: meta.hash(),
        metasteps: meta.metasteps,
        kind: CanaryType::Metagradient.to_string(),
    };
    Ok((out, p))
}

fn check_canaries(cfg: &ExperimentConfig, data: &Partition, canaries: &CanarySet) -> Result<()> {
    canaries.validate(&cfg.model)?;
    if canaries.len() != cfg.audit.canaries {
        return Err(AuditError::DimensionMismatch {
            what: "canary count",
            expected: cfg.audit.canaries,
            got: canaries.len(),
        });
    }
    let used: HashSet<u64> = data
        .train
        .iter()
        .chain(&data.heldout)
        .chain(&data.pretrain)
        .map(|e| e.id)
        .collect();
    let mut own = HashSet::new();
    for &id in &canaries.ids {
        if used.contains(&id) || !own.insert(id) {
            return Err(invalid("canary ids", format!("id {id} collides with another example")));
        }
    }
    Ok(())
}

/// One seed's training run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// Canaries carrying this seed's assignment.
    pub canaries: CanarySet,
    /// `D ∪ C_IN`, in training order.
    pub train_set: Vec<Example>,
    pub tape: TrainingTape,
}

/// Split the canaries and train on `D ∪ C_IN` with `seed`.
pub fn train_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<SeedRun> {
    let split = split_canaries(prep.canaries.len(), seed)?;
    let canaries = prep.canaries.clone().with_assignment(split)?;
    let mut train_set = prep.data.train.clone();
    train_set.extend(canaries.in_examples()?);
    debug_assert_eq!(train_set.len(), prep.data.train.len() + canaries.len() / 2);
    let tcfg = cfg.training.trainer_config(seed);
    let tape = match &prep.init {
        Some(w) => trainer::train_from(&cfg.model, &train_set, &tcfg, w.clone())?,
        None => trainer::dpsgd_train(&cfg.model, &train_set, &tcfg)?,
    };
    Ok(SeedRun {
        seed,
        canaries,
        train_set,
        tape,
    })
}

/// Rebuild a seed's run around a tape saved earlier, checking that the tape
/// was trained on exactly this seed's `D ∪ C_IN`.
pub fn seed_run_from_tape(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, tape: TrainingTape) -> Result<SeedRun> {
    let split = split_canaries(prep.canaries.len(), seed)?;
    let canaries = prep.canaries.clone().with_assignment(split)?;
    let mut train_set = prep.data.train.clone();
    train_set.extend(canaries.in_examples()?);
    if tape.spec != cfg.model {
        return Err(AuditError::TapeMismatch("model spec differs from the config".into()));
    }
    let ids: Vec<u64> = train_set.iter().map(|e| e.id).collect();
    if tape.example_ids != ids {
        return Err(AuditError::TapeMismatch(format!(
            "tape was not trained on D ∪ C_IN for seed {seed}"
        )));
    }
    Ok(SeedRun {
        seed,
        canaries,
        train_set,
        tape,
    })
}

/// Play every configured game on `w`.
pub fn audit_params(
    cfg: &ExperimentConfig,
    canaries: &CanarySet,
    w: &ParamVector,
    seed: u64,
) -> Result<Vec<GuessRecord>> {
    let split = canaries.assignment.as_ref().ok_or(AuditError::MissingAssignment)?;
    let examples = canaries.examples();
    cfg.audit
        .procedure
        .procedures()
        .into_iter()
        .map(|p| run_audit_game(&cfg.model, w, &examples, split, cfg.audit.budget(p), seed))
        .collect()
}

/// Fraction of `data` whose argmax prediction is the label.
pub fn accuracy(spec: &ModelSpec, w: &ParamVector, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for ex in data {
        let logits = model::forward(spec, w, ex)?;
        let pred = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b]).then(b.cmp(&a)));
        if pred == Some(ex.label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// One per procedure, in configured order; empty on failure.
    pub estimates: Vec<EpsilonEstimate>,
    /// Accuracy on `D` at the last iterate.
    pub train_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSummary {
    pub procedure: Procedure,
    /// Seeds that completed.
    pub n: usize,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config_hash: String,
    pub canary_type: CanaryType,
    pub canaries: Provenance,
    pub procedures: Vec<Procedure>,
    pub seeds: Vec<SeedResult>,
    pub summary: Vec<ProcedureSummary>,
}

pub(crate) fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub(crate) fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

fn summarize(procedures: &[Procedure], seeds: &[SeedResult]) -> Vec<ProcedureSummary> {
    procedures
        .iter()
        .map(|&p| {
            let eps: Vec<f64> = seeds
                .iter()
                .filter_map(|s| s.estimates.iter().find(|e| e.procedure == p))
                .map(|e| e.epsilon_lb)
                .collect();
            ProcedureSummary {
                procedure: p,
                n: eps.len(),
                mean: mean(&eps),
                median: median(&eps),
            }
        })
        .collect()
}

impl AuditReport {
    /// Per-seed estimates of `procedure`, in seed order; failed seeds give
    /// `None`.
    pub fn epsilons(&self, procedure: Procedure) -> Vec<Option<f64>> {
        self.seeds
            .iter()
            .map(|s| {
                s.estimates
                    .iter()
                    .find(|e| e.procedure == procedure)
                    .map(|e| e.epsilon_lb)
            })
            .collect()
    }

    pub fn summary_for(&self, procedure: Procedure) -> Option<&ProcedureSummary> {
        self.summary.iter().find(|s| s.procedure == procedure)
    }

    /// Stored aggregates equal the ones recomputed from the seeds.
    pub fn aggregates_consistent(&self) -> bool {
        summarize(&self.procedures, &self.seeds) == self.summary
    }
}

/// Raw per-seed artifacts kept alongside the report.
#[derive(Clone, Debug)]
pub struct SeedArtifacts {
    pub seed: u64,
    pub records: Vec<GuessRecord>,
    /// Only `w_0` and `w_l` are kept; replay recomputes the rest.
    pub tape: Option<TrainingTape>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub config: ExperimentConfig,
    pub report: AuditReport,
    pub canaries: CanarySet,
    pub artifacts: Vec<SeedArtifacts>,
}

fn run_one(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<(SeedResult, SeedArtifacts)> {
    audit_run(cfg, prep, train_seed(cfg, prep, seed)?)
}

/// Play the games on the last iterate of `run`.
pub fn audit_run(cfg: &ExperimentConfig, prep: &Prepared, run: SeedRun) -> Result<(SeedResult, SeedArtifacts)> {
    let seed = run.seed;
    let w = run.tape.final_params();
    let records = audit_params(cfg, &run.canaries, w, seed)?;
    let estimates = records
        .iter()
        .map(|r| r.estimate(cfg.audit.tau, cfg.audit.delta))
        .collect::<Result<Vec<_>>>()?;
    let train_accuracy = accuracy(&cfg.model, w, &prep.data.train)?;
    let tape = cfg.save_tapes.then(|| {
        let mut t = run.tape;
        t.purge_intermediate();
        t
    });
    Ok((
        SeedResult {
            seed,
            estimates,
            train_accuracy: Some(train_accuracy),
            error: None,
        },
        SeedArtifacts { seed, records, tape },
    ))
}

/// Run every seed on prepared inputs. A failing seed is recorded in the
/// report and does not stop the others.
pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> PipelineOutput {
    let outcomes = par::map_slice(&cfg.seeds, |&seed| (seed, run_one(cfg, prep, seed)));
    collect_outputs(cfg, prep, outcomes)
}

/// Ordered merge of per-seed outcomes into a report.
pub fn collect_outputs(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    outcomes: Vec<(u64, Result<(SeedResult, SeedArtifacts)>)>,
) -> PipelineOutput {
    let mut seeds = Vec::with_capacity(outcomes.len());
    let mut artifacts = Vec::new();
    for (seed, out) in outcomes {
        match out {
            Ok((res, art)) => {
                seeds.push(res);
                artifacts.push(art);
            }
            Err(e) => seeds.push(SeedResult {
                seed,
                estimates: Vec::new(),
                train_accuracy: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let procedures = cfg.audit.procedure.procedures();
    let summary = summarize(&procedures, &seeds);
    PipelineOutput {
        config: cfg.clone(),
        report: AuditReport {
            config_hash: cfg.hash(),
            canary_type: cfg.audit.canary_type,
            canaries: prep.provenance.clone(),
            procedures,
            seeds,
            summary,
        },
        canaries: prep.canaries.clone(),
        artifacts,
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineOutput> {
    let prep = prepare(cfg)?;
    Ok(run_prepared(cfg, &prep))
}

impl PipelineOutput {
    /// Write `config.toml`, `report.json`, `estimates.txt`, `canaries.bin`,
    /// `guesses/seed-<s>-<procedure>.tsv` and optionally `tapes/`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("guesses"))?;
        fs::write(dir.join("config.toml"), self.config.to_toml()?)?;
        let mut json = serde_json::to_string_pretty(&self.report)?;
        json.push('\n');
        fs::write(dir.join("report.json"), json)?;
        let mut est = BufWriter::new(File::create(dir.join("estimates.txt"))?);
        for s in &self.report.seeds {
            for e in &s.estimates {
                writeln!(
                    est,
                    "config={} seed={} {}",
                    self.report.config_hash,
                    s.seed,
                    e.to_record()
                )?;
            }
        }
        est.flush()?;
        metacanary::write_canaries(
            BufWriter::new(File::create(dir.join("canaries.bin"))?),
            &self.canaries,
            &self.report.canaries,
        )?;
        for a in &self.artifacts {
            for r in &a.records {
                let path = dir.join("guesses").join(format!("seed-{}-{}.tsv", a.seed, r.procedure));
                let mut w = BufWriter::new(File::create(path)?);
                r.write_text(&mut w)?;
                w.flush()?;
            }
            if let Some(t) = &a.tape {
                fs::create_dir_all(dir.join("tapes"))?;
                write_tape(
                    BufWriter::new(File::create(dir.join("tapes").join(format!("seed-{}.tape", a.seed)))?),
                    t,
                )?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_mean() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(mean(&[1.0, 2.0]), Some(1.5));
    }

    #[test]
    fn accuracy_counts_argmax() {
        let spec = ModelSpec::logreg(1, 2);
        // logit_1 - logit_0 = 2x - 1
        let w = ParamVector::new(vec![0.0, 2.0, 0.0, -1.0], crate::model::Dtype::F64).unwrap();
        let data = [
            Example::new(0, vec![0.0], 0),
            Example::new(1, vec![1.0], 1),
            Example::new(2, vec![1.0], 0),
            Example::new(3, vec![0.2], 0),
        ];
        assert_eq!(accuracy(&spec, &w, &data).unwrap(), 0.75);
    }
}
