use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::MetricRecord;
use super::plot::{self, PlotPoint};
use super::run::{self, RunSummary};
use super::write_bytes;
use crate::error::Result;
use crate::exec::Exec;
use crate::trainer::Ablation;

pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";
pub const CURVES_FILE: &str = "curves.csv";

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub order: usize,
    pub variant: String,
    pub use_reward_shaping: bool,
    pub use_behavior_cloning: bool,
    pub use_token_weights: bool,
    pub runs: usize,
    pub mean_final_success: f64,
    pub median_final_success: f64,
    pub mean_best_success: f64,
    pub mean_late_pass_rate: f64,
    pub median_late_pass_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub run_id: String,
    pub init_success: f64,
    pub final_success: f64,
    pub best_success: f64,
    pub best_iteration: usize,
    pub late_pass_rate: f64,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
    pub summaries: Vec<RunSummary>,
}

impl AblationOutcome {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Runs the four cumulative variants for every seed in `seeds`. Each run
/// writes into `out/<variant>/seed<k>`. Runs execute under `exec`.
pub fn ablate(config: &ExperimentConfig, seeds: &[u64], out: &Path, exec: Exec) -> Result<AblationOutcome> {
    config.validate()?;
    let variants = Ablation::cumulative();
    let jobs: Vec<(Ablation, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = exec.map_slice(&jobs, |&(flags, seed)| {
        let mut c = config.clone();
        c.set_flags(flags);
        c.train.seed = seed;
        let dir = out.join(flags.name()).join(format!("seed{seed}"));
        run::run_experiment(&c, &dir, Exec::Sequential)
    });
    let mut summaries = Vec::with_capacity(jobs.len());
    let mut records: Vec<MetricRecord> = Vec::new();
    for r in results {
        let r = r?;
        records.extend(r.records);
        summaries.push(r.summary);
    }

    let runs: Vec<AblationRun> = summaries
        .iter()
        .map(|s| AblationRun {
            variant: s.variant.clone(),
            seed: s.seed,
            run_id: s.run_id.clone(),
            init_success: s.init_success,
            final_success: s.final_success,
            best_success: s.best_success,
            best_iteration: s.best_iteration,
            late_pass_rate: s.late_pass_rate,
        })
        .collect();
    let rows: Vec<AblationRow> = variants
        .iter()
        .enumerate()
        .map(|(order, flags)| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == flags.name()).collect();
            let finals: Vec<f64> = mine.iter().map(|r| r.final_success).collect();
            let bests: Vec<f64> = mine.iter().map(|r| r.best_success).collect();
            let lates: Vec<f64> = mine.iter().map(|r| r.late_pass_rate).collect();
            AblationRow {
                order,
                variant: flags.name().to_string(),
                use_reward_shaping: flags.use_reward_shaping,
                use_behavior_cloning: flags.use_behavior_cloning,
                use_token_weights: flags.use_token_weights,
                runs: mine.len(),
                mean_final_success: mean(&finals),
                median_final_success: median(&finals),
                mean_best_success: mean(&bests),
                mean_late_pass_rate: mean(&lates),
                median_late_pass_rate: median(&lates),
            }
        })
        .collect();

    write_csv(&out.join(ABLATION_FILE), &rows)?;
    write_csv(&out.join(ABLATION_RUNS_FILE), &runs)?;
    let points: Vec<PlotPoint> = plot::plot_points(&records);
    write_csv(&out.join(CURVES_FILE), &points)?;
    Ok(AblationOutcome {
        rows,
        runs,
        summaries,
    })
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| crate::error::Error::io("<csv>", e.into_error()))?;
    write_bytes(path, &bytes)
}
