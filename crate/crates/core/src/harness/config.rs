//! Flat key-value experiment configuration.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected. Environment variables are never consulted.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envsim::{EnvKind, EnvSpec, Keying, Question};
use crate::error::{Error, Result};
use crate::trainer::{Ablation, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub env_kind: EnvKind,
    pub alphabet_size: u32,
    pub horizon: u32,
    pub moduli: Vec<u32>,
    pub keying: Keying,

    pub bank_size: usize,
    pub bank_seed: u64,
    /// Restrict training to questions whose post-RFT pass rate lies in
    /// `(filter_lo, filter_hi)`. Evaluation always covers the whole bank.
    pub curate: bool,

    pub rft_samples_per_q: usize,
    pub rft_bc_steps: usize,
    pub rft_lr: f64,

    pub use_reward_shaping: bool,
    pub use_behavior_cloning: bool,
    pub use_token_weights: bool,

    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// 0 disables skill-based augmentation.
    pub skill_threshold: u32,
    /// Adds per-iteration elapsed seconds to metrics records. Breaks byte-level reproducibility.
    pub record_wall_clock: bool,
    pub heatmap_samples: usize,

    pub bon_alphabet_size: u32,
    pub bon_horizon: u32,
    pub bon_modulus: u32,
    pub bon_shift: u32,
    pub bon_policy_scale: f64,
    pub bon_policy_seed: u64,
    pub bon_ns: Vec<usize>,
    pub bon_draws: usize,
    pub bon_seed: u64,
    pub bon_tv_tol: f64,
    pub bon_quadrature_points: usize,
    pub bon_kl_tol: f64,
    pub bon_grad_tol: f64,
    pub bon_ratio_tol: f64,
    pub bon_norm_tol: f64,

    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env_kind: EnvKind::SumMod,
            alphabet_size: 5,
            horizon: 3,
            moduli: vec![3, 4, 5],
            keying: Keying::PrevToken,
            bank_size: 64,
            bank_seed: 7,
            curate: false,
            rft_samples_per_q: 4,
            rft_bc_steps: 20,
            rft_lr: 1.0,
            use_reward_shaping: true,
            use_behavior_cloning: true,
            use_token_weights: true,
            out_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2, 3, 4],
            skill_threshold: 0,
            record_wall_clock: false,
            heatmap_samples: 4,
            bon_alphabet_size: 3,
            bon_horizon: 3,
            bon_modulus: 3,
            bon_shift: 1,
            bon_policy_scale: 1.0,
            bon_policy_seed: 11,
            bon_ns: vec![1, 2, 4, 8, 16],
            bon_draws: 200_000,
            bon_seed: 2024,
            bon_tv_tol: 0.01,
            bon_quadrature_points: 200_001,
            bon_kl_tol: 1e-3,
            bon_grad_tol: 1e-9,
            bon_ratio_tol: 1e-12,
            bon_norm_tol: 1e-9,
            train: TrainConfig::default(),
        }
    }
}

fn known_keys() -> BTreeSet<String> {
    let value = toml::Value::try_from(ExperimentConfig::default()).expect("default config serializes");
    value
        .as_table()
        .expect("config is a table")
        .keys()
        .cloned()
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg,
        };
        let table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        let known = known_keys();
        let unknown: Vec<&String> = table.keys().filter(|k| !known.contains(*k)).collect();
        if !unknown.is_empty() {
            return Err(parse_err(format!("unknown keys: {unknown:?}")));
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn flags(&self) -> Ablation {
        Ablation {
            use_reward_shaping: self.use_reward_shaping,
            use_behavior_cloning: self.use_behavior_cloning,
            use_token_weights: self.use_token_weights,
        }
    }

    pub fn set_flags(&mut self, flags: Ablation) {
        self.use_reward_shaping = flags.use_reward_shaping;
        self.use_behavior_cloning = flags.use_behavior_cloning;
        self.use_token_weights = flags.use_token_weights;
    }

    pub fn env(&self) -> EnvSpec {
        let env = match self.env_kind {
            EnvKind::SumMod => EnvSpec::sum_mod(self.alphabet_size, self.horizon, self.moduli.clone()),
            EnvKind::TreePath => {
                let m = self.moduli.first().copied().unwrap_or(0);
                EnvSpec::tree_path(self.alphabet_size, self.horizon, m)
            }
        };
        env.with_keying(self.keying)
    }

    /// Environment and question used by the BoN verification suites.
    pub fn bon_problem(&self) -> (EnvSpec, Question) {
        (
            EnvSpec::tree_path(self.bon_alphabet_size, self.bon_horizon, self.bon_modulus),
            Question::tree_path(0, self.bon_shift, self.bon_modulus),
        )
    }

    /// Everything that determines a run's results, without the output location.
    pub fn effective_block(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = v.as_object_mut() {
            map.remove("out_dir");
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.env().validate()?;
        if self.env_kind == EnvKind::TreePath && self.moduli.len() != 1 {
            return bad("treepath takes exactly one modulus".into());
        }
        self.train.validate()?;
        if self.bank_size == 0 {
            return bad("bank_size must be >= 1".into());
        }
        if self.rft_samples_per_q == 0 || !(self.rft_lr > 0.0) {
            return bad("rft_samples_per_q must be >= 1 and rft_lr positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must list at least one seed".into());
        }
        if self.heatmap_samples == 0 {
            return bad("heatmap_samples must be >= 1".into());
        }
        let (bon_env, _) = self.bon_problem();
        bon_env.validate()?;
        if !bon_env.is_enumerable() {
            return bad("BoN verification environment is too large to enumerate".into());
        }
        if self.bon_ns.is_empty() || self.bon_ns.contains(&0) {
            return bad("bon_ns must be non-empty with every n >= 1".into());
        }
        if self.bon_draws == 0 || self.bon_quadrature_points < 2 {
            return bad("bon_draws must be >= 1 and bon_quadrature_points >= 2".into());
        }
        if !(self.bon_policy_scale >= 0.0) {
            return bad("bon_policy_scale must be >= 0".into());
        }
        let tols = [
            self.bon_tv_tol,
            self.bon_kl_tol,
            self.bon_grad_tol,
            self.bon_ratio_tol,
            self.bon_norm_tol,
        ];
        if tols.iter().any(|t| !(*t > 0.0)) {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }
}
