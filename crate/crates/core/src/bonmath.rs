//! Best-of-N selection and its exact distributions.
//!
//! With binary rewards, BoN keeps a uniformly random reward-1 sample when one
//! exists and a uniformly random sample otherwise. Over an enumerable
//! trajectory space with success probability `p` this gives
//!
//! ```text
//! π_bon(s) = π(s) · [ R(s)·(1 − (1−p)^n)/p + (1 − R(s))·(1−p)^(n−1) ]
//! ```
//!
//! and, conditioned on a positive being selected, `π(s)/p` for every `n`.
//! The Monte-Carlo routines here sample trajectories from the policy and are
//! independent of the enumeration that produces the exact targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envsim::{enumerate_trajectories, EnvSpec, Question, Trajectory};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::policy::{self, PolicyTable, SparseGrad};
use crate::seed;

/// Monte-Carlo draws are split into this many independently seeded shards.
/// The count is fixed so results do not depend on the worker count.
pub const MC_SHARDS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BonConfig {
    pub n: usize,
}

impl BonConfig {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Domain("BoN needs n >= 1".into()));
        }
        Ok(BonConfig { n })
    }
}

/// Index chosen by BoN: uniform among the maximal rewards.
pub fn bon_select_index<R: Rng + ?Sized>(rewards: &[u8], rng: &mut R) -> Result<usize> {
    let best = *rewards
        .iter()
        .max()
        .ok_or_else(|| Error::Contract("bon_select on empty input".into()))?;
    let winners = rewards.iter().filter(|&&r| r == best).count();
    let pick = rng.gen_range(0..winners);
    Ok(rewards
        .iter()
        .enumerate()
        .filter(|(_, &r)| r == best)
        .nth(pick)
        .map(|(i, _)| i)
        .expect("pick < winners"))
}

pub fn bon_select<'a, R: Rng + ?Sized>(trajs: &'a [Trajectory], rng: &mut R) -> Result<&'a Trajectory> {
    let rewards: Vec<u8> = trajs.iter().map(|t| t.reward).collect();
    Ok(&trajs[bon_select_index(&rewards, rng)?])
}

/// `π(s)/p` on positives, 0 elsewhere.
pub fn lemma31_target(probs: &[f64], rewards: &[u8]) -> Result<Vec<f64>> {
    if probs.len() != rewards.len() {
        return Err(Error::Contract("probs and rewards differ in length".into()));
    }
    let p: f64 = probs
        .iter()
        .zip(rewards)
        .filter(|(_, &r)| r == 1)
        .map(|(pi, _)| pi)
        .sum();
    if p <= 0.0 {
        return Err(Error::Domain("no probability mass on positives (p = 0)".into()));
    }
    Ok(probs
        .iter()
        .zip(rewards)
        .map(|(pi, &r)| if r == 1 { pi / p } else { 0.0 })
        .collect())
}

/// BoN selection probability of a single trajectory under binary rewards.
pub fn pbon_density(pi_s: f64, reward: u8, p: f64, n: usize) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("pbon_density needs 0 < p < 1, got {p}")));
    }
    if !(0.0..=1.0).contains(&pi_s) {
        return Err(Error::Domain(format!("pi(s) = {pi_s} outside [0, 1]")));
    }
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let miss = (1.0 - p).powi(n as i32 - 1);
    let factor = if reward == 1 {
        (1.0 - (1.0 - p).powi(n as i32)) / p
    } else {
        miss
    };
    Ok(pi_s * factor)
}

/// Continuous BoN density `n · P(s)^(n−1) · π(s)`.
pub fn pibon_density(cdf_value: f64, density_value: f64, n: usize) -> f64 {
    n as f64 * cdf_value.powi(n as i32 - 1) * density_value
}

/// `KL(π_BoN ‖ π) = log n − (n−1)/n`.
pub fn kl_bon(n: u64) -> Result<f64> {
    if n < 1 {
        return Err(Error::Domain("kl_bon needs n >= 1".into()));
    }
    let nf = n as f64;
    Ok(nf.ln() - (nf - 1.0) / nf)
}

/// Largest `n` with `kl_bon(n) <= epsilon`.
pub fn max_n_for_kl_budget(epsilon: f64) -> Result<u64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!(
            "KL budget must be positive, got {epsilon}"
        )));
    }
    const LIMIT: u64 = 1 << 62;
    if kl_bon(LIMIT)? <= epsilon {
        return Err(Error::Domain(format!("KL budget {epsilon} admits n beyond 2^62")));
    }
    // kl_bon(1) = 0 <= epsilon; grow until the budget is exceeded, then bisect.
    let mut lo = 1u64;
    let mut hi = 2u64;
    while kl_bon(hi)? <= epsilon {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if kl_bon(mid)? <= epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Composite trapezoid rule over `[0, 1]` with `points` nodes.
pub fn trapezoid_unit(points: usize, f: impl Fn(f64) -> f64) -> f64 {
    assert!(points >= 2);
    let h = 1.0 / (points - 1) as f64;
    let inner: f64 = (1..points - 1).map(|i| f(i as f64 * h)).sum();
    h * (0.5 * (f(0.0) + f(1.0)) + inner)
}

/// Total mass of `π_BoN` for uniform `π` on `[0, 1]`.
pub fn uniform_bon_mass(n: usize, points: usize) -> f64 {
    trapezoid_unit(points, |s| pibon_density(s, 1.0, n))
}

/// `KL(π_BoN ‖ π)` for uniform `π` on `[0, 1]`, by quadrature of the BoN density.
pub fn uniform_bon_kl(n: usize, points: usize) -> f64 {
    trapezoid_unit(points, |s| {
        let d = pibon_density(s, 1.0, n);
        if d > 0.0 {
            d * d.ln()
        } else {
            0.0
        }
    })
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Enumerated trajectory space of one question under one policy.
#[derive(Debug, Clone)]
pub struct ExactSpace {
    pub trajectories: Vec<Trajectory>,
    pub probs: Vec<f64>,
    pub rewards: Vec<u8>,
    /// Success probability `Σ_{R=1} π(s)`.
    pub p: f64,
}

impl ExactSpace {
    pub fn new(policy: &PolicyTable, env: &EnvSpec, q: &Question) -> Result<Self> {
        let trajectories = enumerate_trajectories(env, q)?;
        let probs: Vec<f64> = trajectories
            .iter()
            .map(|t| policy::logprob(policy, t).exp())
            .collect();
        let rewards: Vec<u8> = trajectories.iter().map(|t| t.reward).collect();
        let p = probs
            .iter()
            .zip(&rewards)
            .filter(|(_, &r)| r == 1)
            .map(|(pi, _)| pi)
            .sum();
        Ok(ExactSpace {
            trajectories,
            probs,
            rewards,
            p,
        })
    }

    pub fn pbon_target(&self, n: usize) -> Result<Vec<f64>> {
        self.probs
            .iter()
            .zip(&self.rewards)
            .map(|(&pi, &r)| pbon_density(pi, r, self.p, n))
            .collect()
    }

    pub fn lemma_target(&self) -> Result<Vec<f64>> {
        lemma31_target(&self.probs, &self.rewards)
    }
}

/// Lexicographic index of a token sequence, matching `enumerate_trajectories`.
pub fn lex_index(tokens: &[u32], alphabet: u32) -> usize {
    tokens
        .iter()
        .fold(0usize, |acc, &t| acc * alphabet as usize + t as usize)
}

/// Counts of BoN-selected trajectories over `draws` independent rounds,
/// indexed lexicographically. Each round samples `n` fresh trajectories.
pub fn monte_carlo_bon(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    n: usize,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<u64>> {
    BonConfig::new(n)?;
    sharded_counts(env, draws, seed, exec, |rng| {
        select_from_fresh(policy, env, q, n, rng)
    })
}

/// Counts for `BoN_2(BoN_n, BoN_m)`: two independent BoN selections
/// followed by a BoN of size 2 over the winners.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_bon_union(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    n: usize,
    m: usize,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<u64>> {
    BonConfig::new(n)?;
    BonConfig::new(m)?;
    sharded_counts(env, draws, seed, exec, |rng| {
        let pair = [
            select_from_fresh(policy, env, q, n, rng),
            select_from_fresh(policy, env, q, m, rng),
        ];
        bon_select(&pair, rng).expect("two candidates").clone()
    })
}

fn select_from_fresh<R: Rng>(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    n: usize,
    rng: &mut R,
) -> Trajectory {
    let batch: Vec<Trajectory> = (0..n)
        .map(|_| policy::sample_trajectory(policy, env, q, rng))
        .collect();
    bon_select(&batch, rng).expect("n >= 1").clone()
}

fn sharded_counts(
    env: &EnvSpec,
    draws: usize,
    seed: u64,
    exec: Exec,
    draw: impl Fn(&mut rand_chacha::ChaCha8Rng) -> Trajectory + Sync + Send,
) -> Result<Vec<u64>> {
    if !env.is_enumerable() {
        return Err(Error::EnumerationTooLarge {
            size: env.trajectory_count(),
            cap: crate::envsim::ENUMERATION_CAP,
        });
    }
    let size = env.trajectory_count() as usize;
    let shards = exec.map_indexed(MC_SHARDS, |shard| {
        let share = draws / MC_SHARDS + usize::from(shard < draws % MC_SHARDS);
        let mut rng = seed::rng(seed, &[shard as u64]);
        let mut counts = vec![0u64; size];
        for _ in 0..share {
            let t = draw(&mut rng);
            counts[lex_index(&t.tokens, env.alphabet_size)] += 1;
        }
        counts
    });
    let mut total = vec![0u64; size];
    for shard in shards {
        for (t, c) in total.iter_mut().zip(shard) {
            *t += c;
        }
    }
    Ok(total)
}

pub fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonEntry {
    pub tokens: Vec<u32>,
    pub reward: u8,
    pub empirical: f64,
    pub target: f64,
}

/// Empirical-vs-exact comparison for one `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonReport {
    pub n: usize,
    /// Which target: `"pbon"` (full selection law) or `"lemma31"` (conditioned on success).
    pub target_kind: String,
    pub p: f64,
    pub samples: u64,
    pub tv: f64,
    pub entries: Vec<BonEntry>,
}

impl BonReport {
    fn build(space: &ExactSpace, n: usize, kind: &str, counts: &[u64], target: Vec<f64>) -> Self {
        let empirical = normalize_counts(counts);
        let tv = total_variation(&empirical, &target);
        let entries = space
            .trajectories
            .iter()
            .zip(empirical.iter().zip(&target))
            .map(|(t, (&e, &g))| BonEntry {
                tokens: t.tokens.clone(),
                reward: t.reward,
                empirical: e,
                target: g,
            })
            .collect();
        BonReport {
            n,
            target_kind: kind.to_string(),
            p: space.p,
            samples: counts.iter().sum(),
            tv,
            entries,
        }
    }

    pub fn empirical_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.empirical).sum()
    }

    pub fn target_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.target).sum()
    }
}

/// Full BoN selection law against `pbon_density`.
pub fn pbon_report(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    n: usize,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<BonReport> {
    let space = ExactSpace::new(policy, env, q)?;
    let target = space.pbon_target(n)?;
    let counts = monte_carlo_bon(policy, env, q, n, draws, seed, exec)?;
    Ok(BonReport::build(&space, n, "pbon", &counts, target))
}

/// BoN selections conditioned on a positive outcome against `π(s)/p`.
/// `draws` counts accepted (positive) selections.
pub fn lemma31_report(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    n: usize,
    draws: usize,
    seed: u64,
    exec: Exec,
) -> Result<BonReport> {
    let space = ExactSpace::new(policy, env, q)?;
    let target = space.lemma_target()?;
    let size = space.trajectories.len();
    let shards = exec.map_indexed(MC_SHARDS, |shard| {
        let share = draws / MC_SHARDS + usize::from(shard < draws % MC_SHARDS);
        let mut rng = seed::rng(seed, &[0x1e33, shard as u64]);
        let mut counts = vec![0u64; size];
        let mut accepted = 0;
        while accepted < share {
            let t = select_from_fresh(policy, env, q, n, &mut rng);
            if t.is_correct() {
                counts[lex_index(&t.tokens, env.alphabet_size)] += 1;
                accepted += 1;
            }
        }
        counts
    });
    let mut counts = vec![0u64; size];
    for shard in shards {
        counts.iter_mut().zip(shard).for_each(|(c, s)| *c += s);
    }
    Ok(BonReport::build(&space, n, "lemma31", &counts, target))
}

/// Result of checking the two BoN policy-gradient identities by enumeration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientConsistency {
    pub n: usize,
    pub p: f64,
    /// `max |lhs − rhs| / ‖rhs‖_∞` for the positive identity.
    pub positive_rel_err: f64,
    pub negative_rel_err: f64,
    /// Least-squares coefficient of the positive BoN gradient on `E_π[1_{D+} ∇log π]`.
    pub positive_coef: f64,
    /// Least-squares coefficient of the negative BoN gradient on `E_π[∇log π | D−]`.
    pub negative_coef: f64,
    /// `negative_coef / positive_coef`; equals `1 − p`.
    pub coef_ratio: f64,
}

/// Checks, by exact enumeration,
///
/// ```text
/// Σ_{s∈D+} ∇π_bon(s) = n(1−p)^(n−1) · E_π[1_{D+}(s) ∇log π(s)]
/// Σ_{s∈D−} ∇π_bon(s) = n(1−p)^n     · E_π[∇log π(s) | s ∈ D−]
/// ```
///
/// The left sides differentiate `π_bon(s) = π(s)·c(p)` per trajectory with
/// the product and chain rules (including `∇c(p)`); the right sides use the
/// closed-form coefficients. The ratio of the two coefficients is the
/// `(1 − p)` shaping factor for negative samples.
pub fn gradient_consistency_check(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    n: usize,
) -> Result<GradientConsistency> {
    BonConfig::new(n)?;
    let space = ExactSpace::new(policy, env, q)?;
    let p = space.p;
    if !(p > 1e-12 && p < 1.0 - 1e-12) {
        return Err(Error::Domain(format!("degenerate success probability p = {p}")));
    }
    let grads: Vec<SparseGrad> = space
        .trajectories
        .iter()
        .map(|t| policy::grad_logprob(policy, t))
        .collect();

    let nf = n as f64;
    let ni = n as i32;
    let q1 = 1.0 - p;

    let mut grad_p = SparseGrad::new();
    let mut neg_weighted = SparseGrad::new();
    for ((g, &pi), &r) in grads.iter().zip(&space.probs).zip(&space.rewards) {
        if r == 1 {
            grad_p.add_scaled(g, pi);
        } else {
            neg_weighted.add_scaled(g, pi);
        }
    }

    // positive branch: c(p) = (1 − (1−p)^n)/p
    let c = (1.0 - q1.powi(ni)) / p;
    let dc = (nf * q1.powi(ni - 1) * p - (1.0 - q1.powi(ni))) / (p * p);
    // negative branch: h(p) = (1−p)^(n−1)
    let h = q1.powi(ni - 1);
    let dh = if n == 1 {
        0.0
    } else {
        -(nf - 1.0) * q1.powi(ni - 2)
    };

    let mut lhs_pos = SparseGrad::new();
    let mut lhs_neg = SparseGrad::new();
    for ((g, &pi), &r) in grads.iter().zip(&space.probs).zip(&space.rewards) {
        let (target, coef, dcoef) = if r == 1 {
            (&mut lhs_pos, c, dc)
        } else {
            (&mut lhs_neg, h, dh)
        };
        target.add_scaled(g, pi * coef);
        target.add_scaled(&grad_p, pi * dcoef);
    }

    let pos_base = grad_p.clone();
    let neg_base = neg_weighted.clone().scaled(1.0 / q1);
    let rhs_pos = pos_base.clone().scaled(nf * q1.powi(ni - 1));
    let rhs_neg = neg_base.clone().scaled(nf * q1.powi(ni));

    let positive_coef = projection(&lhs_pos, &pos_base);
    let negative_coef = projection(&lhs_neg, &neg_base);
    Ok(GradientConsistency {
        n,
        p,
        positive_rel_err: rel_err(&lhs_pos, &rhs_pos),
        negative_rel_err: rel_err(&lhs_neg, &rhs_neg),
        positive_coef,
        negative_coef,
        coef_ratio: negative_coef / positive_coef,
    })
}

fn rel_err(lhs: &SparseGrad, rhs: &SparseGrad) -> f64 {
    lhs.max_abs_diff(rhs) / rhs.max_abs().max(f64::MIN_POSITIVE)
}

fn dot(a: &SparseGrad, b: &SparseGrad) -> f64 {
    a.rows()
        .filter_map(|(ctx, ra)| {
            b.row(ctx)
                .map(|rb| ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>())
        })
        .sum()
}

/// `<v, base> / <base, base>`.
fn projection(v: &SparseGrad, base: &SparseGrad) -> f64 {
    dot(v, base) / dot(base, base)
}
