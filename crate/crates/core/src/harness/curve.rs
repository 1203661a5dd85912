//! ε̂ as a function of training steps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::epsilon::Procedure;
use crate::error::{invalid, Result};
use crate::harness::config::{CanaryType, ExperimentConfig};
use crate::harness::pipeline::{accuracy, audit_params, mean, median, train_seed, Prepared};
use crate::par;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// `epsilon[p][s]`: procedure `p`, completed seed `s`.
    pub epsilon: Vec<Vec<f64>>,
    /// Per completed seed.
    pub train_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepsCurve {
    pub config_hash: String,
    pub canary_type: CanaryType,
    pub procedures: Vec<Procedure>,
    /// Seeds that completed, in config order.
    pub seeds: Vec<u64>,
    pub failures: Vec<(u64, String)>,
    pub points: Vec<CurvePoint>,
}

/// Sample standard deviation; 0 for fewer than two values.
fn std_dev(v: &[f64]) -> f64 {
    match mean(v) {
        Some(m) if v.len() > 1 => (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt(),
        _ => 0.0,
    }
}

/// Steps `0, every, 2 every, ...`, always ending at `steps`.
pub fn audit_steps(steps: usize, every: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=steps).step_by(every.max(1)).collect();
    if out.last() != Some(&steps) {
        out.push(steps);
    }
    out
}

struct SeedCurve {
    /// `[point][procedure]`
    eps: Vec<Vec<f64>>,
    acc: Vec<f64>,
}

fn seed_curve(cfg: &ExperimentConfig, prep: &Prepared, seed: u64, steps: &[usize]) -> Result<SeedCurve> {
    let run = train_seed(cfg, prep, seed)?;
    let mut eps = Vec::with_capacity(steps.len());
    let mut acc = Vec::with_capacity(steps.len());
    for &t in steps {
        let w = run
            .tape
            .params_at(t)
            .ok_or_else(|| invalid("steps curve", format!("no checkpoint at step {t}")))?;
        let records = audit_params(cfg, &run.canaries, w, seed)?;
        eps.push(
            records
                .iter()
                .map(|r| r.estimate(cfg.audit.tau, cfg.audit.delta).map(|e| e.epsilon_lb))
                .collect::<Result<Vec<_>>>()?,
        );
        acc.push(accuracy(&cfg.model, w, &prep.data.train)?);
    }
    Ok(SeedCurve { eps, acc })
}

/// Train each seed once without privacy and audit every `every` steps.
pub fn emit_steps_curve(cfg: &ExperimentConfig, prep: &Prepared, every: usize) -> Result<StepsCurve> {
    if cfg.training.is_private() {
        return Err(invalid("steps curve", "needs a non-private training plan"));
    }
    if every == 0 {
        return Err(invalid("steps curve", "every must be >= 1"));
    }
    let steps = audit_steps(cfg.training.steps(), every);
    let procedures = cfg.audit.procedure.procedures();
    let runs = par::map_slice(&cfg.seeds, |&s| seed_curve(cfg, prep, s, &steps));
    let mut done = Vec::new();
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (&seed, r) in cfg.seeds.iter().zip(runs) {
        match r {
            Ok(c) => {
                seeds.push(seed);
                done.push(c);
            }
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let points = steps
        .iter()
        .enumerate()
        .map(|(i, &step)| CurvePoint {
            step,
            epsilon: (0..procedures.len())
                .map(|p| done.iter().map(|c| c.eps[i][p]).collect())
                .collect(),
            train_accuracy: done.iter().map(|c| c.acc[i]).collect(),
        })
        .collect();
    Ok(StepsCurve {
        config_hash: cfg.hash(),
        canary_type: cfg.audit.canary_type,
        procedures,
        seeds,
        failures,
        points,
    })
}

impl StepsCurve {
    /// `step`, then mean and standard deviation of ε̂ per procedure, then
    /// mean train accuracy.
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string()];
        for p in &self.procedures {
            h.push(format!("eps_{p}_mean"));
            h.push(format!("eps_{p}_std"));
        }
        h.push("train_accuracy".into());
        h
    }

    pub fn median_at(&self, point: usize, procedure: Procedure) -> Option<f64> {
        let p = self.procedures.iter().position(|&x| x == procedure)?;
        median(&self.points.get(point)?.epsilon[p])
    }

    pub fn point_at_step(&self, step: usize) -> Option<usize> {
        self.points.iter().position(|p| p.step == step)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header().join(","))?;
        for pt in &self.points {
            let mut row = vec![pt.step.to_string()];
            for eps in &pt.epsilon {
                row.push(mean(eps).map_or_else(|| "nan".into(), |m| m.to_string()));
                row.push(std_dev(eps).to_string());
            }
            row.push(mean(&pt.train_accuracy).map_or_else(|| "nan".into(), |m| m.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}
