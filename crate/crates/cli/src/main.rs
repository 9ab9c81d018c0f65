use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use oreal_core::harness::{self, ExperimentConfig};
use oreal_core::trainer::Ablation;
use oreal_core::{Error, Exec};

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;

#[derive(Parser)]
#[command(
    name = "oreal",
    version,
    about = "Outcome-reward RL experiments on synthetic token tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// RFT initialization followed by training.
    Run {
        #[command(flatten)]
        common: Common,
        /// Named ablation variant, e.g. oreal, reinforce, behavior-cloning.
        #[arg(long)]
        variant: Option<String>,
    },
    /// The four cumulative variants over every configured seed.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// BoN verification suites. Exits 2 when any suite fails.
    VerifyBon {
        #[command(flatten)]
        common: Common,
    },
    /// Plotline CSV from metrics JSONL files.
    Plot {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Rejection-sampling initialization only.
    Rft {
        #[command(flatten)]
        common: Common,
    },
    /// Token-score heatmap from the checkpoints of a finished run in `--out`.
    Heatmap {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        config.seeds = vec![seed];
        config.bon_seed = seed;
    }
    if let Some(out) = &common.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    let out = config.out_dir.clone();
    Ok((config, out))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(command: Command) -> Result<u8, Error> {
    let exec = Exec::default();
    match command {
        Command::Run { common, variant } => {
            let (mut config, out) = load(&common)?;
            if let Some(name) = variant {
                config.set_flags(Ablation::from_name(&name)?);
            }
            let r = harness::run_experiment(&config, &out, exec)?;
            info!("wrote run artifacts to {}", out.display());
            print_json(&r.summary);
        }
        Command::Ablate { common } => {
            let (config, out) = load(&common)?;
            let outcome = harness::ablate(&config, &config.seeds, &out, exec)?;
            for row in &outcome.rows {
                println!(
                    "{:<18} median final {:.3}  mean final {:.3}  mean late pass rate {:.3}",
                    row.variant, row.median_final_success, row.mean_final_success, row.mean_late_pass_rate
                );
            }
            info!("wrote {}", out.join(harness::ablate::ABLATION_FILE).display());
        }
        Command::VerifyBon { common } => {
            let (config, out) = load(&common)?;
            let report = harness::verify_bon(&config, &out, exec)?;
            for s in &report.suites {
                let n = s.n.map_or(String::new(), |n| format!(" n={n}"));
                let status = if s.passed { "PASS" } else { "FAIL" };
                println!(
                    "{status} {}{n}: {:.3e} <= {:.1e}",
                    s.suite, s.measured, s.tolerance
                );
            }
            if !report.all_passed {
                error!("{} suite(s) failed", report.failures().count());
                return Ok(EXIT_VERIFY);
            }
        }
        Command::Plot { files, out } => {
            let outcome = harness::plot(&files, &out)?;
            if !outcome.skipped.is_empty() {
                warn!("skipped {} unreadable file(s)", outcome.skipped.len());
            }
            println!("{} points -> {}", outcome.points.len(), outcome.path.display());
        }
        Command::Rft { common } => {
            let (config, out) = load(&common)?;
            print_json(&harness::rft_only(&config, &out, exec)?);
        }
        Command::Heatmap { common } => {
            let (config, out) = load(&common)?;
            let files = harness::heatmap(&config, Path::new(&out))?;
            println!("{} rows -> {}", files.rows, files.heatmap.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!("{e}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
