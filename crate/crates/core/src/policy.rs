//! Tabular softmax token policy.
//!
//! Each context key owns a logit row of length `A`; contexts never written
//! default to the zero row, i.e. the uniform distribution.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::checkpoint;
use crate::envsim::{ContextKey, EnvSpec, Keying, Question, Trajectory};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    alphabet: usize,
    logits: BTreeMap<ContextKey, Vec<f64>>,
}

impl PolicyTable {
    pub fn new(alphabet: usize) -> Self {
        PolicyTable {
            alphabet,
            logits: BTreeMap::new(),
        }
    }

    pub fn for_env(env: &EnvSpec) -> Self {
        Self::new(env.alphabet_size as usize)
    }

    pub fn alphabet(&self) -> usize {
        self.alphabet
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.logits.get(ctx).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.logits.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn set_logits(&mut self, ctx: ContextKey, row: Vec<f64>) -> Result<()> {
        if row.len() != self.alphabet {
            return Err(Error::Contract(format!(
                "logit row of length {} for alphabet {}",
                row.len(),
                self.alphabet
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite logit".into()));
        }
        self.logits.insert(ctx, row);
        Ok(())
    }

    pub fn row_mut(&mut self, ctx: ContextKey) -> &mut Vec<f64> {
        let a = self.alphabet;
        self.logits.entry(ctx).or_insert_with(|| vec![0.0; a])
    }

    /// `θ += scale · grad`.
    pub fn apply(&mut self, grad: &SparseGrad, scale: f64) {
        for (ctx, g) in &grad.rows {
            let row = self.row_mut(*ctx);
            for (w, gi) in row.iter_mut().zip(g) {
                *w += scale * gi;
            }
        }
    }

    /// Per-context softmax.
    pub fn action_dist(&self, ctx: &ContextKey) -> Vec<f64> {
        match self.logits.get(ctx) {
            Some(row) => softmax(row),
            None => vec![1.0 / self.alphabet as f64; self.alphabet],
        }
    }

    pub fn log_prob_action(&self, ctx: &ContextKey, action: u32) -> f64 {
        match self.logits.get(ctx) {
            Some(row) => row[action as usize] - log_sum_exp(row),
            None => -(self.alphabet as f64).ln(),
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let table = checkpoint::Table {
            width: self.alphabet,
            rows: self
                .logits
                .iter()
                .map(|(k, v)| (checkpoint::context_fields(k).to_vec(), v.clone()))
                .collect(),
        };
        checkpoint::render("policy-table", 3, &table)
    }

    pub fn from_checkpoint_str(text: &str, path: &Path) -> Result<Self> {
        let table = checkpoint::parse("policy-table", 3, text, path)?;
        let mut out = PolicyTable::new(table.width);
        for (key, values) in table.rows {
            let ctx = checkpoint::context_from_fields(&key).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                msg: format!("context key out of range: {key:?}"),
            })?;
            out.logits.insert(ctx, values);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_checkpoint_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&checkpoint::read_file(path)?, path)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Sparse gradient over logits: one dense row per touched context.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row_mut(&mut self, ctx: ContextKey, alphabet: usize) -> &mut Vec<f64> {
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; alphabet])
    }

    pub fn get(&self, ctx: &ContextKey, action: usize) -> f64 {
        self.rows.get(ctx).map_or(0.0, |r| r[action])
    }

    pub fn row(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn contexts(&self) -> impl Iterator<Item = &ContextKey> {
        self.rows.keys()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &SparseGrad, scale: f64) {
        for (ctx, g) in &other.rows {
            let row = self.row_mut(*ctx, g.len());
            for (r, gi) in row.iter_mut().zip(g) {
                *r += scale * gi;
            }
        }
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        for row in self.rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= scale);
        }
        self
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest entrywise difference, treating missing rows as zeros.
    pub fn max_abs_diff(&self, other: &SparseGrad) -> f64 {
        let mut diff = self.clone();
        diff.add_scaled(other, -1.0);
        diff.max_abs()
    }
}

/// Softmax action distribution at `ctx`.
pub fn action_dist(policy: &PolicyTable, ctx: &ContextKey) -> Vec<f64> {
    policy.action_dist(ctx)
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total; return the last non-zero entry
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples `T` tokens sequentially from the policy and verifies the outcome.
pub fn sample_trajectory<R: Rng + ?Sized>(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    rng: &mut R,
) -> Trajectory {
    let horizon = env.horizon as usize;
    let mut tokens = Vec::with_capacity(horizon);
    let mut contexts = Vec::with_capacity(horizon);
    let mut ctx = env.initial_context(q.id);
    for _ in 0..horizon {
        let tok = sample_index(&policy.action_dist(&ctx), rng) as u32;
        contexts.push(ctx);
        tokens.push(tok);
        ctx = env.next_context(ctx, tok);
    }
    finish(env, q, tokens, contexts)
}

pub fn sample_trajectory_seeded(policy: &PolicyTable, env: &EnvSpec, q: &Question, seed: u64) -> Trajectory {
    sample_trajectory(policy, env, q, &mut seed::rng(seed, &[]))
}

/// Argmax decoding; ties go to the lowest token index.
pub fn greedy_trajectory(policy: &PolicyTable, env: &EnvSpec, q: &Question) -> Trajectory {
    let horizon = env.horizon as usize;
    let mut tokens = Vec::with_capacity(horizon);
    let mut contexts = Vec::with_capacity(horizon);
    let mut ctx = env.initial_context(q.id);
    for _ in 0..horizon {
        let tok = match policy.logits(&ctx) {
            Some(row) => argmax(row) as u32,
            None => 0,
        };
        contexts.push(ctx);
        tokens.push(tok);
        ctx = env.next_context(ctx, tok);
    }
    finish(env, q, tokens, contexts)
}

fn finish(env: &EnvSpec, q: &Question, tokens: Vec<u32>, contexts: Vec<ContextKey>) -> Trajectory {
    let mut traj = Trajectory {
        question_id: q.id,
        tokens,
        contexts,
        reward: 0,
    };
    traj.reward = crate::envsim::verify(env, q, &traj).expect("sampled trajectory matches env");
    traj
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy-decoding success rate over a question bank.
pub fn greedy_success(policy: &PolicyTable, env: &EnvSpec, bank: &[Question]) -> f64 {
    if bank.is_empty() {
        return 0.0;
    }
    let solved = bank
        .iter()
        .filter(|q| greedy_trajectory(policy, env, q).is_correct())
        .count();
    solved as f64 / bank.len() as f64
}

/// `Σ_t log π(tokens[t] | contexts[t])`.
pub fn logprob(policy: &PolicyTable, traj: &Trajectory) -> f64 {
    traj.contexts
        .iter()
        .zip(&traj.tokens)
        .map(|(c, &a)| policy.log_prob_action(c, a))
        .sum()
}

/// Score function `∇_θ log π(traj)`: entry `(c, a') = 1[a' = a] − π(a'|c)`,
/// accumulated over repeat visits of a context.
pub fn grad_logprob(policy: &PolicyTable, traj: &Trajectory) -> SparseGrad {
    let mut grad = SparseGrad::new();
    accumulate_grad_logprob(policy, traj, 1.0, &mut grad);
    grad
}

pub(crate) fn accumulate_grad_logprob(
    policy: &PolicyTable,
    traj: &Trajectory,
    scale: f64,
    grad: &mut SparseGrad,
) {
    accumulate_token_grads(policy, traj, |_| scale, grad);
}

/// Adds `Σ_t weight(t) · ∇ log π(a_t | c_t)` into `grad`.
pub(crate) fn accumulate_token_grads(
    policy: &PolicyTable,
    traj: &Trajectory,
    weight: impl Fn(usize) -> f64,
    grad: &mut SparseGrad,
) {
    let a = policy.alphabet();
    for (t, (ctx, &tok)) in traj.contexts.iter().zip(&traj.tokens).enumerate() {
        let w = weight(t);
        if w == 0.0 {
            continue;
        }
        let probs = policy.action_dist(ctx);
        let row = grad.row_mut(*ctx, a);
        for (j, p) in probs.iter().enumerate() {
            row[j] -= w * p;
        }
        row[tok as usize] += w;
    }
}

fn categorical_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum::<f64>()
        .max(0.0)
}

/// Mean over `contexts` of the exact categorical `KL(π_new(·|c) ‖ π_old(·|c))`.
pub fn kl_divergence(p_new: &PolicyTable, p_old: &PolicyTable, contexts: &[ContextKey]) -> f64 {
    if contexts.is_empty() {
        return 0.0;
    }
    let total: f64 = contexts
        .iter()
        .map(|c| categorical_kl(&p_new.action_dist(c), &p_old.action_dist(c)))
        .sum();
    total / contexts.len() as f64
}

/// Gradient of [`kl_divergence`] with respect to the logits of `p_new`:
/// `∂KL_c/∂z_j = p_j (log p_j − log q_j − KL_c)`.
pub fn kl_gradient(p_new: &PolicyTable, p_old: &PolicyTable, contexts: &[ContextKey]) -> SparseGrad {
    let mut grad = SparseGrad::new();
    if contexts.is_empty() {
        return grad;
    }
    let scale = 1.0 / contexts.len() as f64;
    let a = p_new.alphabet();
    for ctx in contexts {
        let p = p_new.action_dist(ctx);
        let q = p_old.action_dist(ctx);
        let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi.ln() - qi.ln())).sum();
        let row = grad.row_mut(*ctx, a);
        for j in 0..a {
            row[j] += scale * p[j] * (p[j].ln() - q[j].ln() - kl);
        }
    }
    grad
}

/// Closed-form KL-regularized optimum `π*(a|s) ∝ π_0(a|s) exp(Q^{π_0}(s,a)/α)`.
///
/// `Q^{π_0}` is computed exactly by backward induction over the full
/// trajectory tree with terminal outcome reward and no discounting. Every
/// tree node needs its own row, so `env` must use full-prefix keying.
pub fn kl_optimal_policy(pi0: &PolicyTable, env: &EnvSpec, q: &Question, alpha: f64) -> Result<PolicyTable> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be positive, got {alpha}")));
    }
    if env.keying != Keying::FullPrefix {
        return Err(Error::Contract(
            "kl_optimal_policy needs full-prefix keying so each tree node has its own row".into(),
        ));
    }
    if !env.is_enumerable() {
        return Err(Error::EnumerationTooLarge {
            size: env.trajectory_count(),
            cap: crate::envsim::ENUMERATION_CAP,
        });
    }
    let mut out = PolicyTable::for_env(env);
    let mut prefix = Vec::with_capacity(env.horizon as usize);
    backward(
        pi0,
        env,
        q,
        alpha,
        env.initial_context(q.id),
        &mut prefix,
        &mut out,
    )?;
    Ok(out)
}

/// Returns `V^{π_0}` at `ctx` and writes the tilted row for `ctx` into `out`.
fn backward(
    pi0: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    alpha: f64,
    ctx: ContextKey,
    prefix: &mut Vec<u32>,
    out: &mut PolicyTable,
) -> Result<f64> {
    let a = env.alphabet_size as usize;
    let last = prefix.len() + 1 == env.horizon as usize;
    let mut qvals = Vec::with_capacity(a);
    for tok in 0..a as u32 {
        prefix.push(tok);
        let value = if last {
            f64::from(Trajectory::from_tokens(env, q, prefix.clone())?.reward)
        } else {
            backward(pi0, env, q, alpha, env.next_context(ctx, tok), prefix, out)?
        };
        prefix.pop();
        qvals.push(value);
    }
    let base = pi0.action_dist(&ctx);
    let v: f64 = base.iter().zip(&qvals).map(|(p, qv)| p * qv).sum();
    let row: Vec<f64> = base
        .iter()
        .zip(&qvals)
        .map(|(p, qv)| p.ln() + qv / alpha)
        .collect();
    let lse = log_sum_exp(&row);
    out.set_logits(ctx, row.into_iter().map(|l| l - lse).collect())?;
    Ok(v)
}

/// Exact success probability of `policy` on `q`, by enumeration.
pub fn success_probability(policy: &PolicyTable, env: &EnvSpec, q: &Question) -> Result<f64> {
    Ok(crate::envsim::enumerate_trajectories(env, q)?
        .iter()
        .filter(|t| t.is_correct())
        .map(|t| logprob(policy, t).exp())
        .sum())
}

/// Fills every context a question can reach with i.i.d. `N(0, scale²)`-ish
/// logits (uniform on `[-scale, scale]`). Test and verification helper.
pub fn randomized_policy(env: &EnvSpec, q: &Question, scale: f64, seed: u64) -> Result<PolicyTable> {
    let mut rng = crate::seed::rng(seed, &[0x7a61]);
    let mut table = PolicyTable::for_env(env);
    for traj in crate::envsim::enumerate_trajectories(env, q)? {
        for ctx in traj.contexts {
            if table.logits(&ctx).is_none() {
                let row = (0..env.alphabet_size)
                    .map(|_| rng.gen_range(-scale..=scale))
                    .collect();
                table.set_logits(ctx, row)?;
            }
        }
    }
    Ok(table)
}
