//! One-run guessing games: split canaries, score them on the last iterate,
//! and turn scores into guesses.
//!
//! Ties at score cutoffs are broken lexicographically on `(score, id)`.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::epsilon::{self, BisectionSearch, Budget, EpsilonEstimate, Procedure, TradeoffForm};
use crate::error::{invalid, AuditError, Result};
use crate::model::{self, Example, ModelSpec, ParamVector};
use crate::rng::{stream, stream_rng};

/// Exact half split of `m` canaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// `+1` if the canary is trained on, `-1` otherwise.
    pub membership: Vec<i8>,
}

impl Split {
    pub fn from_membership(membership: Vec<i8>) -> Result<Self> {
        let m = membership.len();
        if !m.is_multiple_of(2) || membership.iter().any(|&s| s != 1 && s != -1) {
            return Err(invalid("split", "membership must be +-1 with even length"));
        }
        if membership.iter().filter(|&&s| s == 1).count() != m / 2 {
            return Err(invalid("split", "IN and OUT must have equal size"));
        }
        Ok(Self { membership })
    }

    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn is_in(&self, i: usize) -> bool {
        self.membership[i] == 1
    }

    pub fn in_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_in(i)).collect()
    }

    pub fn out_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_in(i)).collect()
    }

    pub fn swapped(&self) -> Self {
        Self {
            membership: self.membership.iter().map(|s| -s).collect(),
        }
    }
}

/// Random exact half split, deterministic in `seed`.
pub fn split_canaries(m: usize, seed: u64) -> Result<Split> {
    if m == 0 || !m.is_multiple_of(2) {
        return Err(invalid("canary count", format!("{m} is not a positive even number")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut stream_rng(seed, stream::SPLIT, 0));
    let mut membership = vec![-1i8; m];
    for &i in &order[..m / 2] {
        membership[i] = 1;
    }
    Ok(Split { membership })
}

/// Negative cross-entropy of each canary under `w`.
pub fn score_canaries(spec: &ModelSpec, w: &ParamVector, canaries: &[Example]) -> Result<Vec<f64>> {
    canaries.iter().map(|c| model::loss(spec, w, c).map(|l| -l)).collect()
}

fn ranked(scores: &[f64], ids: &[u64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(ids[a].cmp(&ids[b])));
    idx
}

/// `+1` for the `k_pos` highest scores, `-1` for the `k_neg` lowest, `0` else.
pub fn guess_steinke(scores: &[f64], ids: &[u64], k_pos: usize, k_neg: usize) -> Result<Vec<i8>> {
    let m = scores.len();
    if ids.len() != m {
        return Err(AuditError::DimensionMismatch {
            what: "canary ids",
            expected: m,
            got: ids.len(),
        });
    }
    if k_pos + k_neg > m {
        return Err(AuditError::BudgetExceeded {
            budget: k_pos + k_neg,
            available: m,
        });
    }
    let order = ranked(scores, ids);
    let mut t = vec![0i8; m];
    for &i in &order[..k_neg] {
        t[i] = -1;
    }
    for &i in &order[m - k_pos..] {
        t[i] = 1;
    }
    Ok(t)
}

/// Disjoint pairs `(IN canary, OUT canary)` covering every canary once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairAssignment {
    pub pairs: Vec<(usize, usize)>,
}

impl PairAssignment {
    /// Random pairing of the IN and OUT halves of `split`.
    pub fn random(split: &Split, seed: u64) -> Self {
        let ins = split.in_indices();
        let mut outs = split.out_indices();
        outs.shuffle(&mut stream_rng(seed, stream::PAIRS, 0));
        Self {
            pairs: ins.into_iter().zip(outs).collect(),
        }
    }

    /// Every canary in exactly one pair, first member IN, second OUT.
    pub fn validate(&self, split: &Split) -> Result<()> {
        let m = split.len();
        if self.pairs.len() * 2 != m {
            return Err(invalid("pairing", "must contain m/2 pairs"));
        }
        let mut seen = vec![false; m];
        for &(a, b) in &self.pairs {
            for i in [a, b] {
                if i >= m || std::mem::replace(&mut seen[i], true) {
                    return Err(invalid("pairing", format!("canary {i} missing or repeated")));
                }
            }
            if !split.is_in(a) || split.is_in(b) {
                return Err(invalid("pairing", "pairs must be (IN, OUT)"));
            }
        }
        Ok(())
    }
}

/// Paired guesses: per pair `+1` (first member guessed IN), `-1` (second
/// member guessed IN, including ties) or `0` (abstain). Returns the guesses
/// and the number of pairs whose true IN member was picked.
pub fn guess_pairs(scores: &[f64], pairs: &PairAssignment, k: usize) -> Result<(Vec<i8>, usize)> {
    let n = pairs.pairs.len();
    if k > n {
        return Err(AuditError::BudgetExceeded {
            budget: k,
            available: n,
        });
    }
    let gap: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|&(a, b)| (scores[a] - scores[b]).abs())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // largest gap first; ties by pair index
    order.sort_by(|&a, &b| match gap[b].total_cmp(&gap[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut t = vec![0i8; n];
    for &p in &order[..k] {
        let (a, b) = pairs.pairs[p];
        t[p] = if scores[a] > scores[b] { 1 } else { -1 };
    }
    let correct = t.iter().filter(|&&x| x == 1).count();
    Ok((t, correct))
}

/// Outcome of one audit game, one entry per canary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuessRecord {
    pub procedure: Procedure,
    pub ids: Vec<u64>,
    /// True membership `S`.
    pub membership: Vec<i8>,
    /// Guesses `T`. In the paired game only the member guessed IN carries
    /// `+1`; its partner stays `0`, so `||T||_1 = k`.
    pub guesses: Vec<i8>,
    pub scores: Vec<f64>,
    pub budget: Budget,
    /// `v` (include/exclude) or `k'` (paired).
    pub correct: usize,
    #[serde(default)]
    pub pairs: Option<PairAssignment>,
}

impl GuessRecord {
    pub fn m(&self) -> usize {
        self.ids.len()
    }

    /// `sum_i max(0, T_i S_i)`.
    pub fn count_correct(&self) -> usize {
        self.guesses
            .iter()
            .zip(&self.membership)
            .filter(|(&t, &s)| t != 0 && t == s)
            .count()
    }

    pub fn guess_count(&self) -> usize {
        self.guesses.iter().filter(|&&t| t != 0).count()
    }

    /// Convert to an ε lower bound.
    pub fn estimate(&self, tau: f64, delta: f64) -> Result<EpsilonEstimate> {
        match self.budget {
            Budget::Steinke { .. } => {
                let r = self.budget.total() as u64;
                let mut est = epsilon::steinke_epsilon_lb(
                    self.m() as u64,
                    r,
                    self.correct as u64,
                    delta,
                    tau,
                    BisectionSearch::default(),
                )?;
                est.budget = self.budget;
                Ok(est)
            }
            Budget::Pairs { k } => epsilon::mahlou_epsilon_lb(
                self.m() / 2,
                k,
                self.correct,
                delta,
                tau,
                &epsilon::default_grid(),
                TradeoffForm::Symmetric,
            ),
        }
    }

    /// Tab-separated, one canary per line: `id  S  T  score  pair`.
    /// `pair` is the pair index in the paired game and `-` otherwise.
    /// Header lines start with `#`.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# procedure={} budget={} m={}",
            self.procedure,
            budget_token(&self.budget),
            self.m()
        )?;
        writeln!(w, "# id\tS\tT\tscore\tpair")?;
        let mut pair_of = vec![None; self.m()];
        if let Some(p) = &self.pairs {
            for (k, &(a, b)) in p.pairs.iter().enumerate() {
                pair_of[a] = Some(k);
                pair_of[b] = Some(k);
            }
        }
        for (i, slot) in pair_of.iter().enumerate() {
            let pair = slot.map_or_else(|| "-".to_string(), |k| k.to_string());
            writeln!(
                w,
                "{}\t{}\t{}\t{:?}\t{}",
                self.ids[i], self.membership[i], self.guesses[i], self.scores[i], pair
            )?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut procedure = None;
        let mut budget = None;
        let mut declared_m = None;
        let mut ids = Vec::new();
        let mut membership = Vec::new();
        let mut guesses = Vec::new();
        let mut scores = Vec::new();
        let mut pair_ix: Vec<Option<usize>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |reason: &str| invalid("guess record", format!("line {}: {reason}", lineno + 1));
            if let Some(rest) = line.strip_prefix('#') {
                for tok in rest.split_whitespace() {
                    if let Some(p) = tok.strip_prefix("procedure=") {
                        procedure = Some(p.parse::<Procedure>()?);
                    } else if let Some(b) = tok.strip_prefix("budget=") {
                        budget = Some(parse_budget(b).ok_or_else(|| bad("bad budget"))?);
                    } else if let Some(m) = tok.strip_prefix("m=") {
                        declared_m = Some(m.parse::<usize>().map_err(|_| bad("bad m"))?);
                    }
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(bad("expected 5 columns"));
            }
            ids.push(cols[0].parse().map_err(|_| bad("id"))?);
            membership.push(cols[1].parse().map_err(|_| bad("S"))?);
            guesses.push(cols[2].parse().map_err(|_| bad("T"))?);
            scores.push(cols[3].parse().map_err(|_| bad("score"))?);
            pair_ix.push(if cols[4] == "-" {
                None
            } else {
                Some(cols[4].parse().map_err(|_| bad("pair"))?)
            });
        }
        let procedure = procedure.ok_or_else(|| invalid("guess record", "missing procedure header"))?;
        let budget = budget.ok_or_else(|| invalid("guess record", "missing budget header"))?;
        let declared_m = declared_m.ok_or_else(|| invalid("guess record", "missing m header"))?;
        if ids.len() != declared_m {
            return Err(AuditError::DimensionMismatch {
                what: "guess record rows",
                expected: declared_m,
                got: ids.len(),
            });
        }
        let membership: Vec<i8> = membership;
        let pairs = if procedure == Procedure::Pairs {
            let n = membership.len() / 2;
            let mut slots = vec![(usize::MAX, usize::MAX); n];
            for (i, p) in pair_ix.iter().enumerate() {
                let k = p
                    .filter(|&k| k < n)
                    .ok_or_else(|| invalid("guess record", "bad pair index"))?;
                if membership[i] == 1 {
                    slots[k].0 = i;
                } else {
                    slots[k].1 = i;
                }
            }
            Some(PairAssignment { pairs: slots })
        } else {
            None
        };
        let mut rec = GuessRecord {
            procedure,
            ids,
            membership,
            guesses,
            scores,
            budget,
            correct: 0,
            pairs,
        };
        rec.validate()?;
        rec.correct = rec.count_correct();
        Ok(rec)
    }

    /// Structural checks: value domains, budget and pairing.
    pub fn validate(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(invalid("guess record", "no canaries"));
        }
        if self.budget.procedure() != self.procedure {
            return Err(invalid("guess record", "budget does not match procedure"));
        }
        if self.membership.iter().any(|&s| s != 1 && s != -1) {
            return Err(invalid("guess record", "membership must be +-1"));
        }
        if self.guesses.iter().any(|t| !(-1..=1).contains(t)) {
            return Err(invalid("guess record", "guesses must be -1, 0 or 1"));
        }
        if self.guess_count() > self.budget.total() {
            return Err(AuditError::BudgetExceeded {
                budget: self.guess_count(),
                available: self.budget.total(),
            });
        }
        match (&self.pairs, self.procedure) {
            (Some(p), Procedure::Pairs) => p.validate(&Split::from_membership(self.membership.clone())?)?,
            (None, Procedure::Steinke) => {}
            _ => return Err(invalid("guess record", "pairing present only for the paired game")),
        }
        Ok(())
    }
}

fn budget_token(b: &Budget) -> String {
    match *b {
        Budget::Steinke { k_pos, k_neg } => format!("{k_pos}+{k_neg}"),
        Budget::Pairs { k } => k.to_string(),
    }
}

fn parse_budget(s: &str) -> Option<Budget> {
    match s.split_once('+') {
        Some((a, b)) => Some(Budget::Steinke {
            k_pos: a.parse().ok()?,
            k_neg: b.parse().ok()?,
        }),
        None => Some(Budget::Pairs { k: s.parse().ok()? }),
    }
}

/// Build guesses from precomputed scores.
pub fn play_scores(scores: &[f64], ids: &[u64], split: &Split, budget: Budget, seed: u64) -> Result<GuessRecord> {
    let m = split.len();
    if scores.len() != m || ids.len() != m {
        return Err(AuditError::DimensionMismatch {
            what: "canary scores",
            expected: m,
            got: scores.len(),
        });
    }
    match budget {
        Budget::Steinke { k_pos, k_neg } => {
            let guesses = guess_steinke(scores, ids, k_pos, k_neg)?;
            let mut rec = GuessRecord {
                procedure: Procedure::Steinke,
                ids: ids.to_vec(),
                membership: split.membership.clone(),
                guesses,
                scores: scores.to_vec(),
                budget,
                correct: 0,
                pairs: None,
            };
            rec.correct = rec.count_correct();
            Ok(rec)
        }
        Budget::Pairs { k } => {
            let pairs = PairAssignment::random(split, seed);
            pairs.validate(split)?;
            let (t, correct) = guess_pairs(scores, &pairs, k)?;
            let mut guesses = vec![0i8; m];
            for (&(a, b), &tp) in pairs.pairs.iter().zip(&t) {
                match tp {
                    1 => guesses[a] = 1,
                    -1 => guesses[b] = 1,
                    _ => {}
                }
            }
            let rec = GuessRecord {
                procedure: Procedure::Pairs,
                ids: ids.to_vec(),
                membership: split.membership.clone(),
                guesses,
                scores: scores.to_vec(),
                budget,
                correct,
                pairs: Some(pairs),
            };
            debug_assert_eq!(rec.count_correct(), correct);
            Ok(rec)
        }
    }
}

/// Score the canaries on the final model `w` and play the game.
pub fn run_audit_game(
    spec: &ModelSpec,
    w: &ParamVector,
    canaries: &[Example],
    split: &Split,
    budget: Budget,
    seed: u64,
) -> Result<GuessRecord> {
    let scores = score_canaries(spec, w, canaries)?;
    let ids: Vec<u64> = canaries.iter().map(|c| c.id).collect();
    play_scores(&scores, &ids, split, budget, seed)
}

/// Evaluate every budget in `budgets` and keep the largest estimate. The
/// result is flagged as carrying no multiple-comparison correction.
pub fn scan_budgets(
    scores: &[f64],
    ids: &[u64],
    split: &Split,
    budgets: &[Budget],
    tau: f64,
    delta: f64,
    seed: u64,
) -> Result<EpsilonEstimate> {
    let mut best: Option<EpsilonEstimate> = None;
    for &b in budgets {
        let est = play_scores(scores, ids, split, b, seed)?.estimate(tau, delta)?;
        if best.as_ref().is_none_or(|x| est.epsilon_lb > x.epsilon_lb) {
            best = Some(est);
        }
    }
    let mut best = best.ok_or_else(|| invalid("budget scan", "empty budget grid"))?;
    best.no_multiplicity_correction = true;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steinke_guess_examples() {
        let t = guess_steinke(&[0.9, 0.5, 0.1], &[0, 1, 2], 1, 1).unwrap();
        assert_eq!(t, vec![1, 0, -1]);
        assert_eq!(guess_steinke(&[0.9, 0.5], &[0, 1], 0, 0).unwrap(), vec![0, 0]);
        assert!(matches!(
            guess_steinke(&[0.9, 0.5], &[0, 1], 2, 1),
            Err(AuditError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn ties_resolve_by_id() {
        let scores = [1.0, 1.0, 1.0, 0.0];
        let t = guess_steinke(&scores, &[5, 3, 9, 1], 1, 0).unwrap();
        assert_eq!(t, vec![0, 0, 1, 0]);
        for _ in 0..10 {
            assert_eq!(guess_steinke(&scores, &[5, 3, 9, 1], 1, 0).unwrap(), t);
        }
        let t = guess_steinke(&scores, &[5, 3, 9, 1], 0, 2).unwrap();
        assert_eq!(t, vec![0, -1, 0, -1]);
    }

    #[test]
    fn pair_examples() {
        let pairs = PairAssignment { pairs: vec![(0, 1)] };
        assert_eq!(guess_pairs(&[0.9, 0.1], &pairs, 1).unwrap(), (vec![1], 1));
        assert_eq!(guess_pairs(&[0.4, 0.4], &pairs, 1).unwrap(), (vec![-1], 0));
        assert_eq!(guess_pairs(&[0.9, 0.1], &pairs, 0).unwrap(), (vec![0], 0));
        assert!(guess_pairs(&[0.9, 0.1], &pairs, 2).is_err());
    }

    #[test]
    fn split_basics() {
        let s = split_canaries(2, 11).unwrap();
        assert_eq!(s.in_indices().len(), 1);
        assert_eq!(split_canaries(10, 4).unwrap(), split_canaries(10, 4).unwrap());
        assert!(split_canaries(3, 0).is_err());
        assert!(split_canaries(0, 0).is_err());
    }

    #[test]
    fn pairing_is_structurally_valid() {
        let s = split_canaries(40, 2).unwrap();
        let p = PairAssignment::random(&s, 8);
        p.validate(&s).unwrap();
        let mut bad = p.clone();
        bad.pairs[0].1 = bad.pairs[1].1;
        assert!(bad.validate(&s).is_err());
    }

    #[test]
    fn text_round_trip() {
        let split = split_canaries(6, 1).unwrap();
        let scores = [-0.1, -2.0, -0.3, -1.5, -0.7, -0.25];
        let ids = [10, 11, 12, 13, 14, 15];
        for budget in [Budget::Steinke { k_pos: 2, k_neg: 1 }, Budget::Pairs { k: 2 }] {
            let rec = play_scores(&scores, &ids, &split, budget, 3).unwrap();
            let mut buf = Vec::new();
            rec.write_text(&mut buf).unwrap();
            let back = GuessRecord::read_text(&buf[..]).unwrap();
            assert_eq!(back, rec);
        }
    }
}
