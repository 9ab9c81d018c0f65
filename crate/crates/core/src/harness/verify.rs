//! BoN verification suites: Monte-Carlo selection laws against their exact
//! targets, density normalization, the KL closed form, and the
//! policy-gradient identities.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablate::write_csv;
use super::config::ExperimentConfig;
use super::write_json;
use crate::bonmath::{self, ExactSpace};
use crate::error::Result;
use crate::exec::Exec;
use crate::policy;

pub const VERIFY_FILE: &str = "verify.json";
pub const BON_SUMMARY_FILE: &str = "bon_summary.csv";
pub const KL_TABLE_FILE: &str = "kl_bon.csv";

/// Pass rates at which the selection density is checked for normalization.
pub const NORMALIZATION_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub n: Option<usize>,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(suite: &str, n: Option<usize>, measured: f64, tolerance: f64) -> Self {
        SuiteResult {
            suite: suite.to_string(),
            n,
            measured,
            tolerance,
            passed: measured <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlRow {
    pub n: usize,
    pub formula: f64,
    pub quadrature: f64,
    pub abs_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BonSummaryRow {
    pub n: usize,
    pub p: f64,
    pub samples: u64,
    pub pbon_tv: f64,
    pub lemma31_tv: f64,
    pub kl_formula: f64,
    pub kl_quadrature: f64,
    pub grad_positive_rel_err: f64,
    pub grad_negative_rel_err: f64,
    pub coef_ratio: f64,
    pub coef_ratio_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub all_passed: bool,
    pub p: f64,
    pub ns: Vec<usize>,
    pub suites: Vec<SuiteResult>,
    pub kl_table: Vec<KlRow>,
}

impl VerifyReport {
    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed)
    }
}

/// Rescales `space` so its success probability is `p_hat` and returns the
/// positive and negative mass of the `n`-sample selection density.
pub fn pbon_masses(space: &ExactSpace, p_hat: f64, n: usize) -> Result<(f64, f64)> {
    let (mut pos, mut neg) = (0.0, 0.0);
    for (&pi, &r) in space.probs.iter().zip(&space.rewards) {
        let scaled = if r == 1 {
            pi * p_hat / space.p
        } else {
            pi * (1.0 - p_hat) / (1.0 - space.p)
        };
        let d = bonmath::pbon_density(scaled, r, p_hat, n)?;
        if r == 1 {
            pos += d;
        } else {
            neg += d;
        }
    }
    Ok((pos, neg))
}

/// Runs every suite, writes one JSON report per `n` and target, the summary
/// CSV across `n`, the KL table, and the pass/fail report.
pub fn verify_bon(config: &ExperimentConfig, out: &Path, exec: Exec) -> Result<VerifyReport> {
    config.validate()?;
    let (env, q) = config.bon_problem();
    let pi = policy::randomized_policy(&env, &q, config.bon_policy_scale, config.bon_policy_seed)?;
    let space = ExactSpace::new(&pi, &env, &q)?;
    let mut suites = Vec::new();
    let mut rows = Vec::new();
    let mut kl_table = Vec::new();

    for (i, &n) in config.bon_ns.iter().enumerate() {
        let seed = crate::seed::derive(config.bon_seed, &[n as u64, i as u64]);
        let pbon = bonmath::pbon_report(&pi, &env, &q, n, config.bon_draws, seed, exec)?;
        let lemma = bonmath::lemma31_report(&pi, &env, &q, n, config.bon_draws, seed ^ 1, exec)?;
        write_json(&out.join(format!("bon_report_pbon_n{n}.json")), &pbon)?;
        write_json(&out.join(format!("bon_report_lemma31_n{n}.json")), &lemma)?;
        suites.push(SuiteResult::new("pbon_tv", Some(n), pbon.tv, config.bon_tv_tol));
        suites.push(SuiteResult::new(
            "lemma31_tv",
            Some(n),
            lemma.tv,
            config.bon_tv_tol,
        ));

        let formula = bonmath::kl_bon(n as u64)?;
        let quadrature = bonmath::uniform_bon_kl(n, config.bon_quadrature_points);
        let kl_err = (formula - quadrature).abs();
        suites.push(SuiteResult::new(
            "kl_quadrature",
            Some(n),
            kl_err,
            config.bon_kl_tol,
        ));
        kl_table.push(KlRow {
            n,
            formula,
            quadrature,
            abs_err: kl_err,
        });

        let g = bonmath::gradient_consistency_check(&pi, &env, &q, n)?;
        let ratio_err = (g.coef_ratio - (1.0 - g.p)).abs();
        suites.push(SuiteResult::new(
            "gradient_identities",
            Some(n),
            g.positive_rel_err.max(g.negative_rel_err),
            config.bon_grad_tol,
        ));
        suites.push(SuiteResult::new(
            "shaping_ratio",
            Some(n),
            ratio_err,
            config.bon_ratio_tol,
        ));

        let mut worst_norm: f64 = 0.0;
        for &p_hat in &NORMALIZATION_GRID {
            let (pos, neg) = pbon_masses(&space, p_hat, n)?;
            worst_norm = worst_norm.max((pos + neg - 1.0).abs());
        }
        suites.push(SuiteResult::new(
            "pbon_normalization",
            Some(n),
            worst_norm,
            config.bon_norm_tol,
        ));

        rows.push(BonSummaryRow {
            n,
            p: space.p,
            samples: pbon.samples,
            pbon_tv: pbon.tv,
            lemma31_tv: lemma.tv,
            kl_formula: formula,
            kl_quadrature: quadrature,
            grad_positive_rel_err: g.positive_rel_err,
            grad_negative_rel_err: g.negative_rel_err,
            coef_ratio: g.coef_ratio,
            coef_ratio_err: ratio_err,
        });
    }

    // all-negative fallback mass at p = 0.5, n = 4 is (1 − p)^n
    let (_, neg) = pbon_masses(&space, 0.5, 4)?;
    suites.push(SuiteResult::new(
        "negative_mass_p0.5_n4",
        Some(4),
        (neg - 0.0625).abs(),
        config.bon_norm_tol,
    ));

    let report = VerifyReport {
        all_passed: suites.iter().all(|s| s.passed),
        p: space.p,
        ns: config.bon_ns.clone(),
        suites,
        kl_table,
    };
    write_csv(&out.join(BON_SUMMARY_FILE), &rows)?;
    write_csv(&out.join(KL_TABLE_FILE), &report.kl_table)?;
    write_json(&out.join(VERIFY_FILE), &report)?;
    Ok(report)
}
