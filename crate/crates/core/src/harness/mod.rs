//! Experiment driver: configuration, runs, ablations, BoN verification,
//! and table emission. Every output is written into a caller-chosen
//! directory, which is created if missing.

pub mod ablate;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod run;
pub mod verify;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub use ablate::{ablate, AblationOutcome, AblationRow, AblationRun};
pub use config::ExperimentConfig;
pub use metrics::MetricRecord;
pub use plot::{plot, PlotOutcome, PlotPoint};
pub use run::{heatmap, rft_only, run_experiment, RftSummary, RunOutput, RunSummary};
pub use verify::{verify_bon, SuiteResult, VerifyReport};

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}
