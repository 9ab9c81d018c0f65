//! Append-only metrics records, one JSON object per line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::IterationMetrics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub run_id: String,
    pub iteration: usize,
    /// Absent values (e.g. losses of a skipped iteration) are omitted.
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

impl MetricRecord {
    pub fn from_iteration(run_id: &str, m: &IterationMetrics, wall_clock_s: Option<f64>) -> Self {
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        let mut metrics = BTreeMap::new();
        metrics.insert("mean_pass_rate".to_string(), m.mean_pass_rate);
        metrics.insert("groups".to_string(), m.groups as f64);
        metrics.insert("kept".to_string(), m.kept as f64);
        metrics.insert("skipped".to_string(), flag(m.skipped));
        metrics.insert("policy_updated".to_string(), flag(m.policy_updated));
        metrics.insert("kl".to_string(), m.kl);
        metrics.insert("greedy_success".to_string(), m.greedy_success);
        let optional = [
            ("l1", m.l1),
            ("l2", m.l2),
            ("total", m.total),
            ("credit_loss", m.credit_loss),
        ];
        for (name, value) in optional {
            if let Some(v) = value {
                metrics.insert(name.to_string(), v);
            }
        }
        MetricRecord {
            run_id: run_id.to_string(),
            iteration: m.iteration,
            metrics,
            wall_clock_s,
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

pub fn write_jsonl<W: Write>(mut writer: W, records: &[MetricRecord]) -> Result<()> {
    for r in records {
        if r.metrics.values().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!(
                "non-finite metric in run {} iteration {}",
                r.run_id, r.iteration
            )));
        }
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n").map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {}: {e}", i + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, records)?;
    super::write_bytes(path, &buf)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), path)
}

/// Checks the per-run ordering invariant: iterations strictly increase within each run id.
pub fn check_monotone(records: &[MetricRecord]) -> Result<()> {
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if let Some(&prev) = last.get(r.run_id.as_str()) {
            if r.iteration <= prev {
                return Err(Error::Contract(format!(
                    "run {}: iteration {} after {}",
                    r.run_id, r.iteration, prev
                )));
            }
        }
        last.insert(&r.run_id, r.iteration);
    }
    Ok(())
}
