//! Batch soundness simulations over several privacy levels.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::epsilon::Procedure;
use crate::error::{invalid, AuditError, Result};
use crate::simulate::{mc_soundness_oracle, SoundnessConfig, SoundnessReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameSize {
    /// Canaries, or pairs for the paired game.
    pub m: usize,
    pub guesses: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsConfig {
    pub epsilon0: Vec<f64>,
    pub trials: usize,
    pub tau: f64,
    pub delta: f64,
    pub seed: u64,
    pub steinke: GameSize,
    pub pairs: GameSize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        Self {
            epsilon0: vec![0.0, 0.5, 1.0, 2.0],
            trials: 200,
            tau: 0.05,
            delta: 0.0,
            seed: 0,
            steinke: GameSize { m: 2000, guesses: 400 },
            pairs: GameSize { m: 1000, guesses: 200 },
        }
    }
}

impl BoundsConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AuditError::Config(e.to_string()))?;
        if cfg.epsilon0.is_empty() || cfg.trials == 0 {
            return Err(invalid("bounds config", "need at least one epsilon0 and one trial"));
        }
        Ok(cfg)
    }

    pub fn soundness_config(&self, procedure: Procedure, epsilon0: f64) -> SoundnessConfig {
        let size = match procedure {
            Procedure::Steinke => self.steinke,
            Procedure::Pairs => self.pairs,
        };
        SoundnessConfig {
            epsilon0,
            m: size.m,
            guesses: size.guesses,
            trials: self.trials,
            procedure,
            tau: self.tau,
            delta: self.delta,
            seed: self.seed,
        }
    }
}

/// One report per (procedure, epsilon0), procedure-major.
pub fn simulate_bounds(cfg: &BoundsConfig, procedures: &[Procedure]) -> Result<Vec<SoundnessReport>> {
    let mut out = Vec::new();
    for &p in procedures {
        for &e in &cfg.epsilon0 {
            out.push(mc_soundness_oracle(&cfg.soundness_config(p, e))?);
        }
    }
    Ok(out)
}

pub fn write_bounds_csv<W: Write>(reports: &[SoundnessReport], mut w: W) -> Result<()> {
    writeln!(
        w,
        "procedure,epsilon0,m,guesses,trials,violation_rate,mean_epsilon,positive_rate"
    )?;
    for r in reports {
        let c = &r.config;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.procedure, c.epsilon0, c.m, c.guesses, c.trials, r.violation_rate, r.mean_epsilon, r.positive_rate
        )?;
    }
    Ok(())
}
