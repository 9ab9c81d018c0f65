//! Rejection-sampling initialization and the outcome-reward RL loop.
//!
//! Per iteration: snapshot `π_old`, roll out `K` samples per question,
//! verify, drop all-pass / all-fail groups, pick one positive and one
//! negative per remaining question, read token weights from the current
//! credit table, update the credit table on the pair labels, then update
//! the policy on
//!
//! ```text
//! Σ_t [ −ω+_t log π(a_t|c_t) 1{D+} + η F ω−_t log(π/π_old)(a_t|c_t) 1{D−} ] + β KL(π ‖ π_old)
//! ```
//!
//! averaged over pairs, with `F = 1 − p̂` by default.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageMode, RolloutGroup};
use crate::credit::{self, CreditTable, TokenWeights};
use crate::envsim::{ContextKey, EnvSpec, Question, Trajectory};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::policy::{self, PolicyTable, SparseGrad};
use crate::seed;

// stream tags for seed derivation
const TAG_ROLLOUT: u64 = 1;
const TAG_PAIR: u64 = 2;
const TAG_BATCH: u64 = 3;
const TAG_NOISE: u64 = 4;
const TAG_RFT: u64 = 5;
const TAG_PASS: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_questions: usize,
    pub rollouts_per_question: usize,
    pub iterations: usize,
    pub policy_lr: f64,
    pub credit_lr: f64,
    /// Iterations at the start during which only the credit table learns.
    /// Applies when token weights are enabled.
    pub warmup_steps: usize,
    pub beta: f64,
    pub eta: f64,
    pub gamma: f64,
    pub advantage_mode: AdvantageMode,
    pub filter_lo: f64,
    pub filter_hi: f64,
    pub seed: u64,
    /// Gradient steps per iteration against the same `π_old` snapshot.
    pub inner_steps: usize,
    /// Greedy evaluation cadence for best-checkpoint selection.
    pub eval_every: usize,
    /// Probability of flipping a verified reward. 0 disables the noise.
    pub verifier_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_questions: 16,
            rollouts_per_question: 16,
            iterations: 200,
            policy_lr: 8.0,
            credit_lr: 128.0,
            warmup_steps: 10,
            beta: 0.01,
            eta: 1.0,
            gamma: 1.0,
            advantage_mode: AdvantageMode::Shaped,
            filter_lo: 0.0,
            filter_hi: 0.8,
            seed: 0,
            inner_steps: 1,
            eval_every: 10,
            verifier_noise: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_questions == 0 || self.rollouts_per_question == 0 || self.iterations == 0 {
            return bad("batch_questions, rollouts_per_question and iterations must be >= 1".into());
        }
        if self.inner_steps == 0 || self.eval_every == 0 {
            return bad("inner_steps and eval_every must be >= 1".into());
        }
        if !(self.beta >= 0.0) || !(self.eta >= 0.0) {
            return bad(format!(
                "beta ({}) and eta ({}) must be >= 0",
                self.beta, self.eta
            ));
        }
        if !(self.policy_lr > 0.0) || !(self.credit_lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(0.0 <= self.filter_lo && self.filter_lo < self.filter_hi && self.filter_hi <= 1.0) {
            return bad(format!(
                "curation band needs 0 <= lo < hi <= 1, got ({}, {})",
                self.filter_lo, self.filter_hi
            ));
        }
        if !(0.0..=0.5).contains(&self.verifier_noise) {
            return bad(format!("verifier_noise {} outside [0, 0.5]", self.verifier_noise));
        }
        Ok(())
    }
}

/// Which objective components are active. All off is the REINFORCE baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ablation {
    pub use_reward_shaping: bool,
    pub use_behavior_cloning: bool,
    pub use_token_weights: bool,
}

impl Ablation {
    pub const REINFORCE: Ablation = Ablation {
        use_reward_shaping: false,
        use_behavior_cloning: false,
        use_token_weights: false,
    };
    pub const FULL: Ablation = Ablation {
        use_reward_shaping: true,
        use_behavior_cloning: true,
        use_token_weights: true,
    };

    /// The four cumulative variants in ablation-table order.
    pub fn cumulative() -> [Ablation; 4] {
        [
            Ablation::REINFORCE,
            Ablation {
                use_reward_shaping: true,
                ..Ablation::REINFORCE
            },
            Ablation {
                use_reward_shaping: true,
                use_behavior_cloning: true,
                use_token_weights: false,
            },
            Ablation::FULL,
        ]
    }

    /// Unique name for every flag combination.
    pub fn name(&self) -> &'static str {
        match (
            self.use_reward_shaping,
            self.use_behavior_cloning,
            self.use_token_weights,
        ) {
            (false, false, false) => "reinforce",
            (true, false, false) => "reward-shaping",
            (true, true, false) => "behavior-cloning",
            (true, true, true) => "oreal",
            (false, true, false) => "bc-only",
            (false, false, true) => "tw-only",
            (false, true, true) => "bc-tw",
            (true, false, true) => "rs-tw",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        for rs in [false, true] {
            for bc in [false, true] {
                for tw in [false, true] {
                    let a = Ablation {
                        use_reward_shaping: rs,
                        use_behavior_cloning: bc,
                        use_token_weights: tw,
                    };
                    if a.name() == name {
                        return Ok(a);
                    }
                }
            }
        }
        Err(Error::Config(format!("unknown variant `{name}`")))
    }

    /// Plain-language statement of the objective this flag set trains.
    pub fn describe(&self) -> String {
        let pos = if self.use_behavior_cloning {
            "positive: behavior cloning, -log pi(y+)"
        } else {
            "positive: policy gradient with advantage (1 - batch mean reward)"
        };
        let neg = if self.use_reward_shaping {
            "negative: eta * F * log(pi/pi_old)(y-), F from advantage_mode"
        } else {
            "negative: policy gradient with advantage (0 - batch mean reward), no pi_old ratio"
        };
        let tw = if self.use_token_weights {
            "per-token weights omega+/omega- from the credit table"
        } else {
            "unit per-token weights"
        };
        format!("{pos}; {neg}; {tw}; beta * KL(pi || pi_old) always on")
    }
}

/// Behavior-cloning result of rejection-sampling initialization.
#[derive(Debug, Clone)]
pub struct RftOutcome {
    pub policy: PolicyTable,
    pub kept: Vec<Trajectory>,
    /// Set when no positive sample was found; `policy` is then the base.
    pub no_positives: bool,
}

/// Samples `samples_per_q` rollouts per question, keeps the correct ones, and
/// runs `bc_steps` full-batch gradient-ascent steps on their mean log-likelihood.
#[allow(clippy::too_many_arguments)]
pub fn rft_init(
    base: &PolicyTable,
    env: &EnvSpec,
    bank: &[Question],
    samples_per_q: usize,
    bc_steps: usize,
    lr: f64,
    seed: u64,
    exec: Exec,
) -> Result<RftOutcome> {
    if samples_per_q == 0 {
        return Err(Error::Contract("samples_per_q must be >= 1".into()));
    }
    let kept: Vec<Trajectory> = exec
        .map_slice(bank, |q| {
            (0..samples_per_q)
                .map(|k| {
                    let mut rng = seed::rng(seed, &[TAG_RFT, u64::from(q.id), k as u64]);
                    policy::sample_trajectory(base, env, q, &mut rng)
                })
                .filter(Trajectory::is_correct)
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
    if kept.is_empty() {
        warn!("rejection sampling found no positives; returning base policy");
        return Ok(RftOutcome {
            policy: base.clone(),
            kept,
            no_positives: true,
        });
    }
    let policy = behavior_clone(base, &kept, bc_steps, lr);
    Ok(RftOutcome {
        policy,
        kept,
        no_positives: false,
    })
}

pub fn behavior_clone(base: &PolicyTable, data: &[Trajectory], steps: usize, lr: f64) -> PolicyTable {
    let mut policy = base.clone();
    if data.is_empty() {
        return policy;
    }
    let scale = 1.0 / data.len() as f64;
    for _ in 0..steps {
        let mut grad = SparseGrad::new();
        for t in data {
            policy::accumulate_grad_logprob(&policy, t, scale, &mut grad);
        }
        policy.apply(&grad, lr);
    }
    policy
}

/// Mean reward of `k` seeded rollouts.
pub fn estimate_pass_rate(policy: &PolicyTable, env: &EnvSpec, q: &Question, k: usize, seed: u64) -> f64 {
    assert!(k >= 1, "estimate_pass_rate needs k >= 1");
    let hits: usize = (0..k)
        .filter(|&i| {
            let mut rng = seed::rng(seed, &[TAG_PASS, u64::from(q.id), i as u64]);
            policy::sample_trajectory(policy, env, q, &mut rng).is_correct()
        })
        .count();
    hits as f64 / k as f64
}

/// Keeps question ids whose pass rate lies strictly inside `(lo, hi)`.
pub fn curate_bank(rates: &BTreeMap<u32, f64>, lo: f64, hi: f64) -> Result<Vec<u32>> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Contract(format!("invalid band ({lo}, {hi})")));
    }
    Ok(rates
        .iter()
        .filter(|(_, &p)| lo < p && p < hi)
        .map(|(&id, _)| id)
        .collect())
}

/// Uniformly picks one correct and one incorrect index.
pub fn select_pair<R: Rng + ?Sized>(group: &RolloutGroup, rng: &mut R) -> Result<(usize, usize)> {
    let pos: Vec<usize> = (0..group.rewards.len())
        .filter(|&i| group.rewards[i] == 1)
        .collect();
    let neg: Vec<usize> = (0..group.rewards.len())
        .filter(|&i| group.rewards[i] == 0)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Contract(format!(
            "question {} has no contrastive pair (pass rate {})",
            group.question_id, group.pass_rate
        )));
    }
    Ok((pos[rng.gen_range(0..pos.len())], neg[rng.gen_range(0..neg.len())]))
}

/// Sorted, deduplicated contexts visited by `trajs`.
pub fn visited_contexts<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Vec<ContextKey> {
    let set: BTreeSet<ContextKey> = trajs
        .into_iter()
        .flat_map(|t| t.contexts.iter().copied())
        .collect();
    set.into_iter().collect()
}

fn add_kl(
    policy: &PolicyTable,
    old: &PolicyTable,
    contexts: &[ContextKey],
    beta: f64,
    loss: &mut f64,
    grad: &mut SparseGrad,
) {
    if beta > 0.0 {
        *loss += beta * policy::kl_divergence(policy, old, contexts);
        grad.add_scaled(&policy::kl_gradient(policy, old, contexts), beta);
    }
}

/// Mean `−log π(s)` over positives plus `β · KL(π ‖ π_old)`.
pub fn loss_l1(
    policy: &PolicyTable,
    old: &PolicyTable,
    positives: &[Trajectory],
    contexts: &[ContextKey],
    beta: f64,
) -> (f64, SparseGrad) {
    let mut loss = 0.0;
    let mut grad = SparseGrad::new();
    if !positives.is_empty() {
        let scale = 1.0 / positives.len() as f64;
        for t in positives {
            loss -= scale * policy::logprob(policy, t);
            policy::accumulate_grad_logprob(policy, t, -scale, &mut grad);
        }
    }
    add_kl(policy, old, contexts, beta, &mut loss, &mut grad);
    (loss, grad)
}

/// Mean `F · log(π(s)/π_old(s))` over negatives plus `β · KL(π ‖ π_old)`.
pub fn loss_l2(
    policy: &PolicyTable,
    old: &PolicyTable,
    negatives: &[Trajectory],
    f_values: &[f64],
    contexts: &[ContextKey],
    beta: f64,
) -> Result<(f64, SparseGrad)> {
    if negatives.len() != f_values.len() {
        return Err(Error::Contract(format!(
            "{} negatives but {} F values",
            negatives.len(),
            f_values.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = SparseGrad::new();
    if !negatives.is_empty() {
        let scale = 1.0 / negatives.len() as f64;
        for (t, &f) in negatives.iter().zip(f_values) {
            loss += scale * f * (policy::logprob(policy, t) - policy::logprob(old, t));
            policy::accumulate_grad_logprob(policy, t, scale * f, &mut grad);
        }
    }
    add_kl(policy, old, contexts, beta, &mut loss, &mut grad);
    Ok((loss, grad))
}

/// One contrastive pair with the per-token multipliers applied to each side.
#[derive(Debug, Clone)]
pub struct WeightedPair<'a> {
    pub positive: &'a Trajectory,
    pub negative: &'a Trajectory,
    pub pos_weights: Vec<f64>,
    pub neg_weights: Vec<f64>,
    /// `F` for the negative term (`1 − p̂` when shaping with the default mode).
    pub neg_coef: f64,
}

fn token_logratio(policy: &PolicyTable, old: &PolicyTable, traj: &Trajectory, t: usize) -> f64 {
    let (c, a) = (&traj.contexts[t], traj.tokens[t]);
    policy.log_prob_action(c, a) - old.log_prob_action(c, a)
}

fn weighted_logprob(policy: &PolicyTable, traj: &Trajectory, w: &[f64]) -> f64 {
    traj.contexts
        .iter()
        .zip(&traj.tokens)
        .zip(w)
        .map(|((c, &a), wt)| wt * policy.log_prob_action(c, a))
        .sum()
}

/// Batch objective for any ablation variant, averaged over pairs.
///
/// * behavior cloning on: positive term `−Σ_t w+_t log π`; off: the same
///   scaled by `1 − baseline` (centered REINFORCE).
/// * reward shaping on: negative term `η F Σ_t w−_t log(π/π_old)`; off:
///   `baseline · Σ_t w−_t log π` (centered REINFORCE, no ratio).
#[allow(clippy::too_many_arguments)]
pub fn pair_objective(
    policy: &PolicyTable,
    old: &PolicyTable,
    pairs: &[WeightedPair<'_>],
    flags: Ablation,
    baseline: f64,
    eta: f64,
    beta: f64,
    contexts: &[ContextKey],
) -> (f64, SparseGrad) {
    let mut loss = 0.0;
    let mut grad = SparseGrad::new();
    if !pairs.is_empty() {
        let scale = 1.0 / pairs.len() as f64;
        for pair in pairs {
            let pos_scale = if flags.use_behavior_cloning {
                1.0
            } else {
                1.0 - baseline
            };
            let pw = &pair.pos_weights;
            loss -= scale * pos_scale * weighted_logprob(policy, pair.positive, pw);
            policy::accumulate_token_grads(policy, pair.positive, |t| -scale * pos_scale * pw[t], &mut grad);

            let nw = &pair.neg_weights;
            if flags.use_reward_shaping {
                let coef = eta * pair.neg_coef;
                let ratio: f64 = (0..pair.negative.len())
                    .map(|t| nw[t] * token_logratio(policy, old, pair.negative, t))
                    .sum();
                loss += scale * coef * ratio;
                policy::accumulate_token_grads(policy, pair.negative, |t| scale * coef * nw[t], &mut grad);
            } else {
                loss += scale * baseline * weighted_logprob(policy, pair.negative, nw);
                policy::accumulate_token_grads(
                    policy,
                    pair.negative,
                    |t| scale * baseline * nw[t],
                    &mut grad,
                );
            }
        }
    }
    add_kl(policy, old, contexts, beta, &mut loss, &mut grad);
    (loss, grad)
}

/// Full objective on one pair with explicit per-token weights.
#[allow(clippy::too_many_arguments)]
pub fn loss_total_weighted(
    policy: &PolicyTable,
    old: &PolicyTable,
    positive: &Trajectory,
    negative: &Trajectory,
    weights_pos: &TokenWeights,
    weights_neg: &TokenWeights,
    neg_coef: f64,
    eta: f64,
    beta: f64,
    contexts: &[ContextKey],
) -> (f64, SparseGrad) {
    let pair = WeightedPair {
        positive,
        negative,
        pos_weights: weights_pos.omega_plus.clone(),
        neg_weights: weights_neg.omega_minus.clone(),
        neg_coef,
    };
    pair_objective(policy, old, &[pair], Ablation::FULL, 0.0, eta, beta, contexts)
}

/// Full objective on one pair with token weights read from `credit`;
/// the negative side is scaled by `η (1 − p̂)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    policy: &PolicyTable,
    old: &PolicyTable,
    credit: &CreditTable,
    positive: &Trajectory,
    negative: &Trajectory,
    p_hat: f64,
    eta: f64,
    beta: f64,
    contexts: &[ContextKey],
) -> Result<(f64, SparseGrad)> {
    let shape = crate::advantage::shape_negative_coefficient(p_hat)?;
    let wp = credit::omega_weights(&credit::token_scores(credit, positive));
    let wn = credit::omega_weights(&credit::token_scores(credit, negative));
    Ok(loss_total_weighted(
        policy, old, positive, negative, &wp, &wn, shape, eta, beta, contexts,
    ))
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_pass_rate: f64,
    pub groups: usize,
    /// Groups surviving the degenerate filter.
    pub kept: usize,
    pub skipped: bool,
    pub policy_updated: bool,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub total: Option<f64>,
    pub credit_loss: Option<f64>,
    pub kl: f64,
    pub greedy_success: f64,
}

/// Policy and credit table at the best periodic evaluation.
#[derive(Debug, Clone)]
pub struct BestCheckpoint {
    pub iteration: usize,
    pub success: f64,
    pub policy: PolicyTable,
    pub credit: CreditTable,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub policy: PolicyTable,
    pub policy_old: PolicyTable,
    pub credit: CreditTable,
    pub iteration: usize,
    pub metrics: Vec<IterationMetrics>,
    /// Incorrect rollouts per question over the whole run.
    pub failure_counts: BTreeMap<u32, u32>,
    pub best: Option<BestCheckpoint>,
}

impl TrainState {
    pub fn new(policy: PolicyTable) -> Self {
        TrainState {
            policy_old: policy.clone(),
            policy,
            credit: CreditTable::new(),
            iteration: 0,
            metrics: Vec::new(),
            failure_counts: BTreeMap::new(),
            best: None,
        }
    }
}

fn rollout_group(
    policy: &PolicyTable,
    env: &EnvSpec,
    q: &Question,
    config: &TrainConfig,
    iteration: usize,
) -> RolloutGroup {
    let trajs = (0..config.rollouts_per_question)
        .map(|k| {
            let path = [TAG_ROLLOUT, iteration as u64, u64::from(q.id), k as u64];
            let mut rng = seed::rng(config.seed, &path);
            let mut t = policy::sample_trajectory(policy, env, q, &mut rng);
            if config.verifier_noise > 0.0 {
                let mut noise = seed::rng(
                    config.seed,
                    &[TAG_NOISE, iteration as u64, u64::from(q.id), k as u64],
                );
                if noise.gen::<f64>() < config.verifier_noise {
                    t.reward ^= 1;
                }
            }
            t
        })
        .collect();
    RolloutGroup::new(q.id, trajs)
}

/// One iteration over `batch`, evaluated on `eval_bank`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut TrainState,
    env: &EnvSpec,
    batch: &[Question],
    eval_bank: &[Question],
    config: &TrainConfig,
    flags: Ablation,
    exec: Exec,
) -> Result<IterationMetrics> {
    let iteration = state.iteration;
    state.policy_old = state.policy.clone();

    let policy = &state.policy;
    let mut groups = exec.map_slice(batch, |q| rollout_group(policy, env, q, config, iteration));

    for g in &groups {
        let fails = g.rewards.iter().filter(|&&r| r == 0).count() as u32;
        *state.failure_counts.entry(g.question_id).or_insert(0) += fails;
    }
    let mean_pass_rate = if groups.is_empty() {
        0.0
    } else {
        groups.iter().map(|g| g.pass_rate).sum::<f64>() / groups.len() as f64
    };
    let n_groups = groups.len();
    groups.retain(|g| !g.is_degenerate());

    let mut metrics = IterationMetrics {
        iteration,
        mean_pass_rate,
        groups: n_groups,
        kept: groups.len(),
        skipped: groups.is_empty(),
        policy_updated: false,
        l1: None,
        l2: None,
        total: None,
        credit_loss: None,
        kl: 0.0,
        greedy_success: 0.0,
    };

    if groups.is_empty() {
        debug!("iteration {iteration}: every group degenerate, skipping");
    } else {
        let selected = select_all_pairs(&mut groups, config, iteration)?;
        let baseline = {
            let total: usize = groups.iter().map(|g| g.rewards.len()).sum();
            let hits: usize = groups
                .iter()
                .map(|g| g.rewards.iter().filter(|&&r| r == 1).count())
                .sum();
            hits as f64 / total as f64
        };

        // token weights come from the credit table before its update
        let pairs: Vec<WeightedPair<'_>> = selected
            .iter()
            .map(|s| {
                let (pos_weights, neg_weights) = if flags.use_token_weights {
                    (
                        credit::omega_weights(&credit::token_scores(&state.credit, &s.positive)).omega_plus,
                        credit::omega_weights(&credit::token_scores(&state.credit, &s.negative)).omega_minus,
                    )
                } else {
                    (vec![1.0; s.positive.len()], vec![1.0; s.negative.len()])
                };
                WeightedPair {
                    positive: &s.positive,
                    negative: &s.negative,
                    pos_weights,
                    neg_weights,
                    neg_coef: s.neg_coef,
                }
            })
            .collect();

        let contexts = visited_contexts(selected.iter().flat_map(|s| [&s.positive, &s.negative]));
        let positives: Vec<Trajectory> = selected.iter().map(|s| s.positive.clone()).collect();
        let negatives: Vec<Trajectory> = selected.iter().map(|s| s.negative.clone()).collect();
        let f_values: Vec<f64> = selected.iter().map(|s| s.neg_coef).collect();
        metrics.l1 = Some(
            loss_l1(
                &state.policy,
                &state.policy_old,
                &positives,
                &contexts,
                config.beta,
            )
            .0,
        );
        metrics.l2 = Some(
            loss_l2(
                &state.policy,
                &state.policy_old,
                &negatives,
                &f_values,
                &contexts,
                config.beta,
            )?
            .0,
        );

        let labelled: Vec<(Trajectory, u8)> = selected
            .iter()
            .flat_map(|s| [(s.positive.clone(), 1), (s.negative.clone(), 0)])
            .collect();
        metrics.credit_loss = Some(credit::credit_update(
            &mut state.credit,
            &labelled,
            config.credit_lr,
        )?);

        let frozen = flags.use_token_weights && iteration < config.warmup_steps;
        for step in 0..config.inner_steps {
            let (loss, grad) = pair_objective(
                &state.policy,
                &state.policy_old,
                &pairs,
                flags,
                baseline,
                config.eta,
                config.beta,
                &contexts,
            );
            if step == 0 {
                metrics.total = Some(loss);
            }
            if frozen {
                break;
            }
            state.policy.apply(&grad, -config.policy_lr);
            metrics.policy_updated = true;
        }
        metrics.kl = policy::kl_divergence(&state.policy, &state.policy_old, &contexts);
    }

    metrics.greedy_success = policy::greedy_success(&state.policy, env, eval_bank);
    state.iteration += 1;
    state.metrics.push(metrics.clone());
    Ok(metrics)
}

struct SelectedPair {
    positive: Trajectory,
    negative: Trajectory,
    neg_coef: f64,
}

fn select_all_pairs(
    groups: &mut [RolloutGroup],
    config: &TrainConfig,
    iteration: usize,
) -> Result<Vec<SelectedPair>> {
    groups
        .iter_mut()
        .map(|g| {
            g.assign(config.advantage_mode)?;
            let mut rng = seed::rng(
                config.seed,
                &[TAG_PAIR, iteration as u64, u64::from(g.question_id)],
            );
            let (i, j) = select_pair(g, &mut rng)?;
            Ok(SelectedPair {
                positive: g.trajectories[i].clone(),
                negative: g.trajectories[j].clone(),
                neg_coef: g.negative_weight(j),
            })
        })
        .collect()
}

/// Draws the iteration's question batch (without replacement).
pub fn sample_batch(train_set: &[Question], size: usize, seed: u64, iteration: usize) -> Vec<Question> {
    let mut rng = seed::rng(seed, &[TAG_BATCH, iteration as u64]);
    let mut idx: Vec<usize> = (0..train_set.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(size.min(train_set.len()));
    idx.sort_unstable();
    idx.into_iter().map(|i| train_set[i].clone()).collect()
}

/// Runs `config.iterations` steps, tracking the best periodic evaluation.
pub fn train(
    state: &mut TrainState,
    env: &EnvSpec,
    train_set: &[Question],
    eval_bank: &[Question],
    config: &TrainConfig,
    flags: Ablation,
    exec: Exec,
) -> Result<()> {
    train_observed(state, env, train_set, eval_bank, config, flags, exec, |_| {})
}

/// [`train`] with a callback invoked after every iteration.
#[allow(clippy::too_many_arguments)]
pub fn train_observed(
    state: &mut TrainState,
    env: &EnvSpec,
    train_set: &[Question],
    eval_bank: &[Question],
    config: &TrainConfig,
    flags: Ablation,
    exec: Exec,
    mut observe: impl FnMut(&IterationMetrics),
) -> Result<()> {
    config.validate()?;
    consider_best(state, policy::greedy_success(&state.policy, env, eval_bank));
    for _ in 0..config.iterations {
        let batch = sample_batch(train_set, config.batch_questions, config.seed, state.iteration);
        let m = train_step(state, env, &batch, eval_bank, config, flags, exec)?;
        observe(&m);
        if state.iteration.is_multiple_of(config.eval_every) || state.iteration == config.iterations {
            consider_best(state, m.greedy_success);
        }
    }
    Ok(())
}

fn consider_best(state: &mut TrainState, success: f64) {
    let better = state.best.as_ref().is_none_or(|b| success > b.success);
    if better {
        state.best = Some(BestCheckpoint {
            iteration: state.iteration,
            success,
            policy: state.policy.clone(),
            credit: state.credit.clone(),
        });
    }
}

/// Same-skill questions (excluding the failing one) for every question that
/// failed at least `threshold` times.
pub fn skill_augment(
    failure_counts: &BTreeMap<u32, u32>,
    bank: &[Question],
    threshold: u32,
) -> Result<Vec<u32>> {
    if threshold < 1 {
        return Err(Error::Contract("skill threshold must be >= 1".into()));
    }
    let skill_of: BTreeMap<u32, u32> = bank.iter().map(|q| (q.id, q.skill)).collect();
    let mut out = BTreeSet::new();
    for (&qid, &fails) in failure_counts {
        if fails < threshold {
            continue;
        }
        let Some(&skill) = skill_of.get(&qid) else {
            continue;
        };
        out.extend(
            bank.iter()
                .filter(|q| q.skill == skill && q.id != qid)
                .map(|q| q.id),
        );
    }
    Ok(out.into_iter().collect())
}
