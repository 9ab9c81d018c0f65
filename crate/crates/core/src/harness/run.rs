use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{self, MetricRecord};
use super::{write_bytes, write_json};
use crate::credit::{self, CreditTable, PositionScores};
use crate::envsim::{self, EnvSpec, Question, Trajectory, ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::policy::{self, PolicyTable};
use crate::seed;
use crate::trainer::{self, TrainState};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const BANK_FILE: &str = "bank.csv";
pub const POLICY_FILE: &str = "policy.ckpt";
pub const INIT_POLICY_FILE: &str = "policy_init.ckpt";
pub const CREDIT_FILE: &str = "credit.ckpt";
pub const CONFIG_FILE: &str = "config.toml";
pub const RFT_SUMMARY_FILE: &str = "rft_summary.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const HEATMAP_TRAJ_FILE: &str = "heatmap_trajectories.csv";

const TAG_HEATMAP: u64 = 0x4ea7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftSummary {
    pub seed: u64,
    pub base_success: f64,
    pub init_success: f64,
    pub kept: usize,
    pub no_positives: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub variant: String,
    pub variant_description: String,
    pub base_success: f64,
    pub init_success: f64,
    pub final_success: f64,
    pub best_success: f64,
    pub best_iteration: usize,
    /// Mean sampled pass rate over the last ten iterations.
    pub late_pass_rate: f64,
    pub iterations: usize,
    pub train_questions: usize,
    pub rft_kept: usize,
    pub skill_augment_ids: Vec<u32>,
    /// Final credit scores split by position over every trajectory of the bank.
    /// Absent when the bank is too large to enumerate or the horizon is 1.
    pub credit_signal: Option<PositionScores>,
    pub effective_config: serde_json::Value,
}

pub fn run_id(config: &ExperimentConfig) -> String {
    format!("{}-s{}", config.flags().name(), config.train.seed)
}

struct Prepared {
    env: EnvSpec,
    bank: Vec<Question>,
    rft: RftSummary,
    init_policy: PolicyTable,
}

fn prepare(config: &ExperimentConfig, exec: Exec) -> Result<Prepared> {
    config.validate()?;
    let env = config.env();
    let bank = envsim::question_bank(&env, config.bank_size, config.bank_seed)?;
    let base = PolicyTable::for_env(&env);
    let outcome = trainer::rft_init(
        &base,
        &env,
        &bank,
        config.rft_samples_per_q,
        config.rft_bc_steps,
        config.rft_lr,
        config.train.seed,
        exec,
    )?;
    let rft = RftSummary {
        seed: config.train.seed,
        base_success: policy::greedy_success(&base, &env, &bank),
        init_success: policy::greedy_success(&outcome.policy, &env, &bank),
        kept: outcome.kept.len(),
        no_positives: outcome.no_positives,
    };
    Ok(Prepared {
        env,
        bank,
        rft,
        init_policy: outcome.policy,
    })
}

/// Rejection-sampling initialization only.
pub fn rft_only(config: &ExperimentConfig, out: &Path, exec: Exec) -> Result<RftSummary> {
    let prep = prepare(config, exec)?;
    envsim::save_bank_csv(&out.join(BANK_FILE), config.env_kind, &prep.bank)?;
    prep.init_policy.save(&out.join(INIT_POLICY_FILE))?;
    write_json(&out.join(RFT_SUMMARY_FILE), &prep.rft)?;
    Ok(prep.rft)
}

fn training_set(config: &ExperimentConfig, prep: &Prepared) -> Result<Vec<Question>> {
    if !config.curate {
        return Ok(prep.bank.clone());
    }
    let rates: BTreeMap<u32, f64> = prep
        .bank
        .iter()
        .map(|q| {
            let p = trainer::estimate_pass_rate(
                &prep.init_policy,
                &prep.env,
                q,
                config.train.rollouts_per_question,
                config.train.seed,
            );
            (q.id, p)
        })
        .collect();
    let kept = trainer::curate_bank(&rates, config.train.filter_lo, config.train.filter_hi)?;
    if kept.is_empty() {
        return Err(Error::Degenerate("curation kept no questions".into()));
    }
    Ok(prep
        .bank
        .iter()
        .filter(|q| kept.contains(&q.id))
        .cloned()
        .collect())
}

fn bank_trajectories(env: &EnvSpec, bank: &[Question]) -> Result<Option<Vec<Trajectory>>> {
    let total = env.trajectory_count().saturating_mul(bank.len() as u128);
    if env.horizon < 2 || total > u128::from(ENUMERATION_CAP) {
        return Ok(None);
    }
    let mut all = Vec::new();
    for q in bank {
        all.extend(envsim::enumerate_trajectories(env, q)?);
    }
    Ok(Some(all))
}

/// Credit scores at the answer versus scratch positions over the bank.
pub fn credit_signal(
    env: &EnvSpec,
    bank: &[Question],
    credit: &CreditTable,
) -> Result<Option<PositionScores>> {
    match bank_trajectories(env, bank)? {
        Some(all) => credit::position_scores(credit, &all).map(Some),
        None => Ok(None),
    }
}

/// Artifacts of one training run kept in memory for callers.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<MetricRecord>,
    pub final_credit: CreditTable,
}

/// RFT initialization followed by training. Writes metrics, summary,
/// checkpoints at the best evaluation, the bank, and the effective config.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, exec: Exec) -> Result<RunOutput> {
    let prep = prepare(config, exec)?;
    let train_set = training_set(config, &prep)?;
    let id = run_id(config);
    let flags = config.flags();
    info!(
        "run {id}: {} training questions, init success {:.3}",
        train_set.len(),
        prep.rft.init_success
    );

    let mut state = TrainState::new(prep.init_policy.clone());
    let start = Instant::now();
    let mut records = Vec::with_capacity(config.train.iterations);
    trainer::train_observed(
        &mut state,
        &prep.env,
        &train_set,
        &prep.bank,
        &config.train,
        flags,
        exec,
        |m| {
            let clock = config.record_wall_clock.then(|| start.elapsed().as_secs_f64());
            records.push(MetricRecord::from_iteration(&id, m, clock));
        },
    )?;

    let best = state.best.as_ref().expect("training evaluates at least once");
    let skill_augment_ids = if config.skill_threshold > 0 {
        trainer::skill_augment(&state.failure_counts, &prep.bank, config.skill_threshold)?
    } else {
        Vec::new()
    };
    let tail = &state.metrics[state.metrics.len().saturating_sub(10)..];
    let summary = RunSummary {
        run_id: id,
        seed: config.train.seed,
        variant: flags.name().to_string(),
        variant_description: flags.describe(),
        base_success: prep.rft.base_success,
        init_success: prep.rft.init_success,
        final_success: state
            .metrics
            .last()
            .map_or(prep.rft.init_success, |m| m.greedy_success),
        best_success: best.success,
        best_iteration: best.iteration,
        late_pass_rate: tail.iter().map(|m| m.mean_pass_rate).sum::<f64>() / tail.len().max(1) as f64,
        iterations: state.metrics.len(),
        train_questions: train_set.len(),
        rft_kept: prep.rft.kept,
        skill_augment_ids,
        credit_signal: credit_signal(&prep.env, &prep.bank, &state.credit)?,
        effective_config: config.effective_block(),
    };

    metrics::save_jsonl(&out.join(METRICS_FILE), &records)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    envsim::save_bank_csv(&out.join(BANK_FILE), config.env_kind, &prep.bank)?;
    prep.init_policy.save(&out.join(INIT_POLICY_FILE))?;
    best.policy.save(&out.join(POLICY_FILE))?;
    best.credit.save(&out.join(CREDIT_FILE))?;
    write_bytes(&out.join(CONFIG_FILE), config.to_toml_string().as_bytes())?;
    Ok(RunOutput {
        summary,
        records,
        final_credit: state.credit,
    })
}

/// Paths written by [`heatmap`].
#[derive(Debug, Clone)]
pub struct HeatmapFiles {
    pub heatmap: PathBuf,
    pub trajectories: PathBuf,
    pub rows: usize,
}

/// Scores sampled trajectories of the saved policy with the saved credit
/// table of a finished run in `run_dir`.
pub fn heatmap(config: &ExperimentConfig, run_dir: &Path) -> Result<HeatmapFiles> {
    config.validate()?;
    let env = config.env();
    let bank = envsim::question_bank(&env, config.bank_size, config.bank_seed)?;
    let policy = PolicyTable::load(&run_dir.join(POLICY_FILE))?;
    let credit = CreditTable::load(&run_dir.join(CREDIT_FILE))?;
    let trajs: Vec<Trajectory> = bank
        .iter()
        .flat_map(|q| {
            let policy = &policy;
            let env = &env;
            (0..config.heatmap_samples).map(move |k| {
                let mut rng = seed::rng(config.train.seed, &[TAG_HEATMAP, u64::from(q.id), k as u64]);
                policy::sample_trajectory(policy, env, q, &mut rng)
            })
        })
        .collect();
    let rows = credit::emit_token_heatmap(&credit, &trajs);
    let mut buf = Vec::new();
    credit::write_heatmap_csv(&mut buf, &rows)?;
    let heatmap = run_dir.join(HEATMAP_FILE);
    write_bytes(&heatmap, &buf)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["traj_id", "question_id", "reward", "tokens"])?;
    for (i, t) in trajs.iter().enumerate() {
        let tokens: Vec<String> = t.tokens.iter().map(u32::to_string).collect();
        w.write_record([
            i.to_string(),
            t.question_id.to_string(),
            t.reward.to_string(),
            tokens.join(" "),
        ])?;
    }
    let trajectories = run_dir.join(HEATMAP_TRAJ_FILE);
    write_bytes(
        &trajectories,
        &w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))?,
    )?;
    Ok(HeatmapFiles {
        heatmap,
        trajectories,
        rows: rows.len(),
    })
}
