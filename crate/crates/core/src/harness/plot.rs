//! Tidy plotline tables. No image backend is linked, so curves are emitted
//! as CSV only.

use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::ablate::write_csv;
use super::metrics::{self, MetricRecord};
use crate::error::{Error, Result};

pub const PLOTLINES_FILE: &str = "plotlines.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub run_id: String,
    pub iteration: usize,
    pub greedy_success: f64,
    pub mean_pass_rate: f64,
}

/// Points sorted by run id, then iteration. Repeated iterations keep the last record.
pub fn plot_points(records: &[MetricRecord]) -> Vec<PlotPoint> {
    let mut points: Vec<PlotPoint> = records
        .iter()
        .map(|r| PlotPoint {
            run_id: r.run_id.clone(),
            iteration: r.iteration,
            greedy_success: r.get("greedy_success").unwrap_or(f64::NAN),
            mean_pass_rate: r.get("mean_pass_rate").unwrap_or(f64::NAN),
        })
        .collect();
    points.sort_by(|a, b| (&a.run_id, a.iteration).cmp(&(&b.run_id, b.iteration)));
    let mut out: Vec<PlotPoint> = Vec::with_capacity(points.len());
    for p in points {
        match out.last_mut() {
            Some(last) if last.run_id == p.run_id && last.iteration == p.iteration => *last = p,
            _ => out.push(p),
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct PlotOutcome {
    pub points: Vec<PlotPoint>,
    pub skipped: Vec<PathBuf>,
    pub path: PathBuf,
}

/// Reads every metrics file it can and writes `out/plotlines.csv`.
/// Unreadable files are skipped with a warning.
pub fn plot(files: &[PathBuf], out: &Path) -> Result<PlotOutcome> {
    if files.is_empty() {
        return Err(Error::Config("plot needs at least one metrics file".into()));
    }
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for f in files {
        match metrics::load_jsonl(f) {
            Ok(r) => records.extend(r),
            Err(e) => {
                warn!("skipping {}: {e}", f.display());
                skipped.push(f.clone());
            }
        }
    }
    let points = plot_points(&records);
    let path = out.join(PLOTLINES_FILE);
    write_csv(&path, &points)?;
    Ok(PlotOutcome {
        points,
        skipped,
        path,
    })
}
