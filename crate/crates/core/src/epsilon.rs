//! Empirical ε lower bounds from guessing-game outcomes.
//!
//! Two estimators:
//!
//! * the analytic approximate-DP tail bound for the include/exclude game,
//!   inverted by bisection over ε ([`steinke_epsilon_lb`]);
//! * the f-DP recursion for the paired game, evaluated on a grid of candidate
//!   ε values ([`alg4_check`], [`mahlou_epsilon_lb`]).
//!
//! Binomial tails are summed in log space, so `r` can reach 10^6 without a
//! normal approximation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, AuditError, Result};

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn ln_choose(n: u64, k: u64) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// `ln P[W = k]` for `W ~ Binomial(r, e^ε / (1 + e^ε))`.
fn ln_pmf(r: u64, k: u64, ln_p: f64, ln_q: f64) -> f64 {
    ln_choose(r, k) + k as f64 * ln_p + (r - k) as f64 * ln_q
}

fn success_logs(epsilon: f64) -> (f64, f64) {
    // p = e^ε/(1+e^ε): ln p = -softplus(-ε), ln(1-p) = -softplus(ε)
    (-softplus(-epsilon), -softplus(epsilon))
}

fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Smallest integer count satisfying `count >= v`, clamped at 0.
fn ceil_count(v: f64) -> u64 {
    if v <= 0.0 {
        0
    } else {
        v.ceil() as u64
    }
}

/// `P[W >= v]` for `W ~ Binomial(r, e^ε/(e^ε+1))`.
pub fn binom_tail_f(v: f64, r: u64, epsilon: f64) -> f64 {
    assert!(epsilon >= 0.0 && !v.is_nan(), "binom_tail_f domain");
    let lo = ceil_count(v);
    if lo == 0 {
        return 1.0;
    }
    if lo > r {
        return 0.0;
    }
    let (ln_p, ln_q) = success_logs(epsilon);
    log_sum_exp((lo..=r).map(|k| ln_pmf(r, k, ln_p, ln_q))).exp().min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteinkeBoundInput {
    /// Total number of canaries.
    pub m: u64,
    /// Guess budget, `||T||_1 <= r`.
    pub r: u64,
    /// Correct guesses.
    pub v: u64,
    pub epsilon: f64,
    pub delta: f64,
}

impl SteinkeBoundInput {
    pub fn validate(&self) -> Result<()> {
        if !(self.v <= self.r && self.r <= self.m) {
            return Err(invalid("bound input", "need 0 <= v <= r <= m"));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid("bound input", "epsilon must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(invalid("bound input", "delta must lie in [0,1)"));
        }
        Ok(())
    }
}

/// `max_{1 <= i <= m} (f(v - i) - f(v)) / i`, with `f` the binomial tail.
///
/// For `i >= v` the numerator is `1 - f(v)`, so the maximum is attained for
/// some `i <= min(v, m)`.
pub fn steinke_max_term(m: u64, r: u64, v: u64, epsilon: f64) -> f64 {
    let (ln_p, ln_q) = success_logs(epsilon);
    let top = v.min(m);
    let mut best = 0.0f64;
    let mut acc = f64::NEG_INFINITY;
    for i in 1..=top {
        // f(v-i) - f(v) = sum_{j=v-i}^{v-1} pmf(j)
        let j = v - i;
        if j <= r {
            let t = ln_pmf(r, j, ln_p, ln_q);
            acc = if acc == f64::NEG_INFINITY {
                t
            } else {
                let hi = acc.max(t);
                hi + ((acc - hi).exp() + (t - hi).exp()).ln()
            };
        }
        best = best.max(acc.exp() / i as f64);
    }
    best
}

/// Right-hand side of the approximate-DP tail bound, capped at 1.
pub fn steinke_prob_bound(input: &SteinkeBoundInput) -> f64 {
    let f_v = binom_tail_f(input.v as f64, input.r, input.epsilon);
    if input.delta == 0.0 || input.v == 0 {
        return f_v.min(1.0);
    }
    let max_term = steinke_max_term(input.m, input.r, input.v, input.epsilon);
    (f_v + 2.0 * input.m as f64 * input.delta * max_term).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BisectionSearch {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
}

impl Default for BisectionSearch {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 20.0,
            tol: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Procedure {
    /// Include/exclude game with top/bottom guesses and the analytic bound.
    Steinke,
    /// Paired game with the f-DP recursion.
    Pairs,
}

impl fmt::Display for Procedure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Procedure::Steinke => "steinke",
            Procedure::Pairs => "pairs",
        })
    }
}

impl FromStr for Procedure {
    type Err = AuditError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "steinke" => Ok(Procedure::Steinke),
            "pairs" | "mahloujifar" => Ok(Procedure::Pairs),
            other => Err(invalid("procedure", format!("unknown {other:?}"))),
        }
    }
}

/// Guess budget of one audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Budget {
    Steinke { k_pos: usize, k_neg: usize },
    Pairs { k: usize },
}

impl Budget {
    pub fn total(&self) -> usize {
        match *self {
            Budget::Steinke { k_pos, k_neg } => k_pos + k_neg,
            Budget::Pairs { k } => k,
        }
    }

    pub fn procedure(&self) -> Procedure {
        match self {
            Budget::Steinke { .. } => Procedure::Steinke,
            Budget::Pairs { .. } => Procedure::Pairs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonEstimate {
    pub procedure: Procedure,
    pub epsilon_lb: f64,
    pub tau: f64,
    pub delta: f64,
    /// Canaries (include/exclude game) or pairs (paired game).
    pub m: usize,
    pub budget: Budget,
    /// `v` or `k'`.
    pub correct: usize,
    /// The search bracket or grid top was itself rejected.
    pub saturated: bool,
    /// Set when the estimate is a maximum over several budgets.
    #[serde(default)]
    pub no_multiplicity_correction: bool,
}

impl EpsilonEstimate {
    /// One-line `key=value` record.
    pub fn to_record(&self) -> String {
        let budget = match self.budget {
            Budget::Steinke { k_pos, k_neg } => format!("k_pos={k_pos} k_neg={k_neg}"),
            Budget::Pairs { k } => format!("k={k}"),
        };
        format!(
            "procedure={} tau={} delta={} m={} {} correct={} epsilon_lb={} saturated={} no_multiplicity_correction={}",
            self.procedure,
            self.tau,
            self.delta,
            self.m,
            budget,
            self.correct,
            self.epsilon_lb,
            self.saturated,
            self.no_multiplicity_correction
        )
    }

    pub fn from_record(line: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| invalid("estimate record", format!("bad token {tok:?}")))?;
            kv.insert(k, v);
        }
        fn get<T: FromStr>(kv: &std::collections::HashMap<&str, &str>, key: &str) -> Result<T> {
            kv.get(key)
                .ok_or_else(|| invalid("estimate record", format!("missing {key}")))?
                .parse()
                .map_err(|_| invalid("estimate record", format!("bad value for {key}")))
        }
        let procedure: Procedure = get::<String>(&kv, "procedure")?.parse()?;
        let budget = match procedure {
            Procedure::Steinke => Budget::Steinke {
                k_pos: get(&kv, "k_pos")?,
                k_neg: get(&kv, "k_neg")?,
            },
            Procedure::Pairs => Budget::Pairs { k: get(&kv, "k")? },
        };
        Ok(Self {
            procedure,
            epsilon_lb: get(&kv, "epsilon_lb")?,
            tau: get(&kv, "tau")?,
            delta: get(&kv, "delta")?,
            m: get(&kv, "m")?,
            budget,
            correct: get(&kv, "correct")?,
            saturated: get(&kv, "saturated")?,
            no_multiplicity_correction: get(&kv, "no_multiplicity_correction")?,
        })
    }
}

/// Largest ε in the bracket at which the observed `v` correct guesses out of
/// `r` are still rejected at level `tau`, located by bisection.
pub fn steinke_epsilon_lb(
    m: u64,
    r: u64,
    v: u64,
    delta: f64,
    tau: f64,
    search: BisectionSearch,
) -> Result<EpsilonEstimate> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(invalid("tau", "must lie in (0,1)"));
    }
    if !(search.lo >= 0.0 && search.hi > search.lo && search.tol > 0.0) {
        return Err(invalid("search bracket", "need 0 <= lo < hi and tol > 0"));
    }
    let bound = |epsilon: f64| {
        steinke_prob_bound(&SteinkeBoundInput {
            m,
            r,
            v,
            epsilon,
            delta,
        })
    };
    SteinkeBoundInput {
        m,
        r,
        v,
        epsilon: search.lo,
        delta,
    }
    .validate()?;
    let mut est = EpsilonEstimate {
        procedure: Procedure::Steinke,
        epsilon_lb: 0.0,
        tau,
        delta,
        m: m as usize,
        budget: Budget::Steinke {
            k_pos: r as usize,
            k_neg: 0,
        },
        correct: v as usize,
        saturated: false,
        no_multiplicity_correction: false,
    };
    let (mut lo, mut hi) = (search.lo, search.hi);
    if bound(lo) >= tau {
        est.epsilon_lb = 0.0;
        return Ok(est);
    }
    if bound(hi) < tau {
        est.epsilon_lb = hi;
        est.saturated = true;
        return Ok(est);
    }
    while hi - lo > search.tol {
        let mid = 0.5 * (lo + hi);
        if bound(mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    est.epsilon_lb = lo;
    Ok(est)
}

/// Which trade-off function an (ε, δ) pair stands for.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TradeoffForm {
    /// `max(0, 1 - δ - e^ε x, e^{-ε}(1 - δ - x))`
    #[default]
    Symmetric,
    /// `max(0, 1 - δ - e^ε x)`, the complement of `e^ε x + δ`.
    OneSided,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub epsilon: f64,
    pub delta: f64,
    #[serde(default)]
    pub form: TradeoffForm,
}

impl TradeoffCurve {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            form: TradeoffForm::Symmetric,
        }
    }

    pub fn one_sided(epsilon: f64, delta: f64) -> Self {
        Self {
            epsilon,
            delta,
            form: TradeoffForm::OneSided,
        }
    }

    /// `f(x)`: minimal type-II error at type-I error `x`.
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        let a = 1.0 - self.delta;
        let e = self.epsilon.exp();
        let mut y = (a - e * x).max(0.0);
        if self.form == TradeoffForm::Symmetric {
            y = y.max((a - x) / e);
        }
        y.max(0.0)
    }

    /// `f^{-1}(y) = inf { x : f(x) <= y }`; zero for `y >= f(0)`.
    pub fn inv(&self, y: f64) -> f64 {
        let y = y.clamp(0.0, 1.0);
        let a = 1.0 - self.delta;
        if y >= a {
            return 0.0;
        }
        let e = self.epsilon.exp();
        let mut x = (a - y) / e;
        if self.form == TradeoffForm::Symmetric {
            // symmetric trade-off functions are their own inverse
            x = x.max(a - e * y);
        }
        x.clamp(0.0, 1.0)
    }

    /// Inverse of the upper envelope `1 - f`, i.e. `f^{-1}(1 - y)`.
    pub fn upper_inv(&self, y: f64) -> f64 {
        self.inv(1.0 - y)
    }
}

pub fn tradeoff_eval(curve: &TradeoffCurve, x: f64) -> f64 {
    curve.eval(x)
}

pub fn tradeoff_inv(curve: &TradeoffCurve, y: f64) -> f64 {
    curve.inv(y)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alg4Input {
    pub tau: f64,
    /// Guesses made.
    pub k: usize,
    /// Correct guesses.
    pub k_correct: usize,
    /// Number of samples (pairs in the paired game).
    pub m: usize,
    /// Alphabet size of each secret.
    pub s: usize,
    /// Mass constants of the recursion seed:
    /// `r[k'] = tau c / m` and `h[k'] = tau (c' - c) / m`.
    pub c: f64,
    pub c_prime: f64,
}

impl Alg4Input {
    /// Binary alphabet with `c = k'` and `c' = k`: the seed places all
    /// probability `tau` on exactly `k'` correct and `k - k'` wrong guesses.
    pub fn new(tau: f64, k: usize, k_correct: usize, m: usize) -> Self {
        Self {
            tau,
            k,
            k_correct,
            m,
            s: 2,
            c: k_correct as f64,
            c_prime: k as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(invalid("recursion input", "tau must lie in (0,1)"));
        }
        if self.k == 0 || self.k_correct == 0 {
            return Err(invalid("recursion input", "need k >= k' >= 1"));
        }
        if !(self.k_correct <= self.k && self.k <= self.m) {
            return Err(invalid("recursion input", "need k' <= k <= m"));
        }
        if self.s < 2 {
            return Err(invalid("recursion input", "alphabet size must be >= 2"));
        }
        if !(self.c >= 0.0 && self.c_prime >= 0.0) {
            return Err(invalid("recursion input", "c and c' must be nonnegative"));
        }
        Ok(())
    }
}

/// Backward recursion over the number of correct guesses. Returns `true`
/// when `k'` correct guesses out of `k` have probability below `tau` under
/// every mechanism satisfying `curve`.
///
/// The lower-bound step `h[i] = (s-1) g(r[i+1])` uses `g = f^{-1}(1 - .)`,
/// the inverse of the increasing envelope `1 - f`.
pub fn alg4_check(curve: &TradeoffCurve, input: &Alg4Input) -> Result<bool> {
    input.validate()?;
    let kc = input.k_correct;
    let k = input.k as f64;
    let m = input.m as f64;
    let mut r = vec![0.0f64; kc + 1];
    let mut h = vec![0.0f64; kc + 1];
    r[kc] = input.tau * input.c / m;
    h[kc] = input.tau * (input.c_prime - input.c) / m;
    for i in (0..kc).rev() {
        h[i] = (input.s - 1) as f64 * curve.upper_inv(r[i + 1]);
        r[i] = r[i + 1] + i as f64 / (k - i as f64) * (h[i] - h[i + 1]);
    }
    Ok(r[0] + h[0] >= k / m)
}

/// Default candidate grid: 0 to 20 in steps of 0.01.
pub fn default_grid() -> Vec<f64> {
    (0..=2000).map(|i| i as f64 * 0.01).collect()
}

/// Largest grid ε whose (ε, δ) trade-off curve passes [`alg4_check`].
pub fn mahlou_epsilon_lb(
    m: usize,
    k: usize,
    k_correct: usize,
    delta: f64,
    tau: f64,
    grid: &[f64],
    form: TradeoffForm,
) -> Result<EpsilonEstimate> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("candidate grid", "must be sorted ascending"));
    }
    if k > m {
        return Err(AuditError::BudgetExceeded {
            budget: k,
            available: m,
        });
    }
    if k_correct > k {
        return Err(invalid("recursion input", "k' exceeds k"));
    }
    let mut est = EpsilonEstimate {
        procedure: Procedure::Pairs,
        epsilon_lb: 0.0,
        tau,
        delta,
        m,
        budget: Budget::Pairs { k },
        correct: k_correct,
        saturated: false,
        no_multiplicity_correction: false,
    };
    if k_correct == 0 || grid.is_empty() {
        return Ok(est);
    }
    let input = Alg4Input::new(tau, k, k_correct, m);
    for (idx, &epsilon) in grid.iter().enumerate().rev() {
        let curve = TradeoffCurve { epsilon, delta, form };
        if alg4_check(&curve, &input)? {
            est.epsilon_lb = epsilon.max(0.0);
            est.saturated = idx + 1 == grid.len();
            break;
        }
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tail_examples() {
        assert_relative_eq!(binom_tail_f(1.0, 1, 0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(binom_tail_f(10.0, 10, 0.0), 9.765625e-4, max_relative = 1e-12);
        for r in [0, 1, 7, 100] {
            assert_eq!(binom_tail_f(0.0, r, 3.0), 1.0);
            assert_eq!(binom_tail_f(-2.5, r, 0.1), 1.0);
        }
        assert_eq!(binom_tail_f(11.0, 10, 1.0), 0.0);
        // non-integer thresholds round up
        assert_eq!(binom_tail_f(9.2, 10, 0.0), binom_tail_f(10.0, 10, 0.0));
    }

    #[test]
    fn tail_handles_huge_r() {
        let t = binom_tail_f(500_000.0, 1_000_000, 0.0);
        assert!((t - 0.5).abs() < 1e-3, "{t}");
        let t = binom_tail_f(520_000.0, 1_000_000, 0.0);
        assert!(t > 0.0 && t < 1e-300 || t == 0.0);
    }

    #[test]
    fn bound_reduces_to_tail_without_delta() {
        let input = SteinkeBoundInput {
            m: 50,
            r: 40,
            v: 30,
            epsilon: 0.7,
            delta: 0.0,
        };
        assert_eq!(steinke_prob_bound(&input), binom_tail_f(30.0, 40, 0.7));
        let zero = SteinkeBoundInput { v: 0, ..input };
        assert_eq!(steinke_prob_bound(&zero), 1.0);
    }

    #[test]
    fn tradeoff_examples() {
        let diag = TradeoffCurve::new(0.0, 0.0);
        for x in [0.0, 0.25, 0.6, 1.0] {
            assert_relative_eq!(diag.eval(x), 1.0 - x, epsilon = 1e-15);
        }
        let c = TradeoffCurve::new(2f64.ln(), 0.0);
        assert_relative_eq!(c.eval(0.25), 0.5, epsilon = 1e-15);
        let c = TradeoffCurve::new(1.0, 0.0);
        assert_relative_eq!(c.inv(c.eval(0.3)), 0.3, epsilon = 1e-12);
        let d = TradeoffCurve::new(1.0, 0.1);
        assert_eq!(d.inv(0.95), 0.0);
        assert_relative_eq!(d.inv(0.0), 0.9, epsilon = 1e-15);
        let o = TradeoffCurve::one_sided(1.0, 0.0);
        assert_relative_eq!(o.eval(0.1), 1.0 - 0.1 * 1f64.exp(), epsilon = 1e-15);
        assert_relative_eq!(o.inv(o.eval(0.1)), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn alg4_single_step_by_hand() {
        // k' = 1: r[1] = tau/m, h[1] = tau (k-1)/m, h[0] = f^{-1}(1 - r[1]), r[0] = r[1]
        let curve = TradeoffCurve::new(0.5, 0.0);
        let input = Alg4Input::new(0.05, 4, 1, 10);
        let r1 = 0.05 / 10.0;
        let h1 = 0.05 * 3.0 / 10.0;
        let h0 = curve.inv(1.0 - r1);
        let expected = r1 + h0 >= 0.4;
        let _ = h1;
        assert_eq!(alg4_check(&curve, &input).unwrap(), expected);
        // h0 = e^{-0.5} r1 here, far below 0.4
        assert_relative_eq!(h0, r1 * (-0.5f64).exp(), max_relative = 1e-12);
        assert!(!expected);
    }

    #[test]
    fn alg4_infinite_epsilon_never_rejects_large_budget() {
        let curve = TradeoffCurve::new(1e3, 0.0);
        let input = Alg4Input::new(0.05, 20, 5, 100);
        assert_eq!(curve.upper_inv(0.3), 0.0);
        assert!(!alg4_check(&curve, &input).unwrap());
    }

    #[test]
    fn alg4_rejects_bad_input() {
        let curve = TradeoffCurve::new(1.0, 0.0);
        assert!(alg4_check(&curve, &Alg4Input::new(0.05, 0, 0, 10)).is_err());
        assert!(alg4_check(&curve, &Alg4Input::new(0.05, 5, 6, 10)).is_err());
        assert!(alg4_check(&curve, &Alg4Input::new(0.05, 11, 6, 10)).is_err());
    }

    #[test]
    fn record_round_trip() {
        let est = EpsilonEstimate {
            procedure: Procedure::Pairs,
            epsilon_lb: 1.23,
            tau: 0.05,
            delta: 1e-5,
            m: 100,
            budget: Budget::Pairs { k: 40 },
            correct: 35,
            saturated: false,
            no_multiplicity_correction: true,
        };
        assert_eq!(EpsilonEstimate::from_record(&est.to_record()).unwrap(), est);
        assert!(EpsilonEstimate::from_record("procedure=pairs").is_err());
    }
}
