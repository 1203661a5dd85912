//! Monte-Carlo soundness harness built on randomized response.
//!
//! Randomized response flips each secret bit with probability
//! `1 / (1 + e^eps0)` and is exactly `eps0`-DP, so a sound estimator may
//! report `eps_hat > eps0` in at most about a `tau` fraction of trials.

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::epsilon::{Budget, Procedure};
use crate::error::{invalid, Result};
use crate::game::{play_scores, PairAssignment, Split};
use crate::par;
use crate::rng::{derive_seed, stream, stream_rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundnessConfig {
    pub epsilon0: f64,
    /// Canaries (include/exclude game) or pairs (paired game).
    pub m: usize,
    /// Total guesses; split evenly into positive and negative guesses for
    /// the include/exclude game.
    pub guesses: usize,
    pub trials: usize,
    pub procedure: Procedure,
    pub tau: f64,
    pub delta: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoundnessReport {
    pub config: SoundnessConfig,
    pub violation_rate: f64,
    pub mean_epsilon: f64,
    /// Trials with a strictly positive estimate.
    pub positive_rate: f64,
    pub estimates: Vec<f64>,
}

fn flip_prob(epsilon0: f64) -> f64 {
    if epsilon0.is_infinite() {
        0.0
    } else {
        1.0 / (1.0 + epsilon0.exp())
    }
}

/// One simulated audit; returns `eps_hat`.
pub fn simulate_trial(cfg: &SoundnessConfig, trial: usize) -> Result<f64> {
    let mut rng = stream_rng(cfg.seed, stream::TRIAL, trial as u64);
    let flip = flip_prob(cfg.epsilon0);
    let noisy = |s: f64, rng: &mut rand_chacha::ChaCha8Rng| if rng.random::<f64>() < flip { -s } else { s };
    let record = match cfg.procedure {
        Procedure::Steinke => {
            let m = cfg.m;
            let membership: Vec<i8> = (0..m).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            let scores: Vec<f64> = membership.iter().map(|&s| noisy(s as f64, &mut rng)).collect();
            let ids: Vec<u64> = (0..m as u64).collect();
            let k_pos = cfg.guesses / 2;
            let budget = Budget::Steinke {
                k_pos,
                k_neg: cfg.guesses - k_pos,
            };
            // the secret vector is uniform, not an exact half split
            let split = Split { membership };
            play_scores(&scores, &ids, &split, budget, 0)?
        }
        Procedure::Pairs => {
            // randomized response acts on the pairs the game will use:
            // it reports which member of each pair is IN
            let n = cfg.m;
            let membership: Vec<i8> = (0..2 * n).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
            let split = Split::from_membership(membership)?;
            let pair_seed = derive_seed(cfg.seed, stream::PAIRS, trial as u64);
            let mut scores = vec![0.0; 2 * n];
            for &(a, b) in &PairAssignment::random(&split, pair_seed).pairs {
                let says_in = noisy(1.0, &mut rng) > 0.0;
                scores[a] = if says_in { 1.0 } else { 0.0 };
                scores[b] = 1.0 - scores[a];
            }
            let ids: Vec<u64> = (0..2 * n as u64).collect();
            play_scores(&scores, &ids, &split, Budget::Pairs { k: cfg.guesses }, pair_seed)?
        }
    };
    Ok(record.estimate(cfg.tau, cfg.delta)?.epsilon_lb)
}

/// Fraction of trials with `eps_hat > eps0`.
pub fn mc_soundness_oracle(cfg: &SoundnessConfig) -> Result<SoundnessReport> {
    if !(cfg.epsilon0 >= 0.0) {
        return Err(invalid("soundness config", "epsilon0 must be >= 0"));
    }
    if cfg.trials == 0 {
        return Err(invalid("soundness config", "trials must be positive"));
    }
    let estimates = par::map_range(cfg.trials, |t| simulate_trial(cfg, t))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let n = estimates.len() as f64;
    let violations = estimates.iter().filter(|&&e| e > cfg.epsilon0).count();
    let positive = estimates.iter().filter(|&&e| e > 0.0).count();
    Ok(SoundnessReport {
        config: cfg.clone(),
        violation_rate: violations as f64 / n,
        mean_epsilon: estimates.iter().sum::<f64>() / n,
        positive_rate: positive as f64 / n,
        estimates,
    })
}
