//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use oreal_core::bonmath::{self, ExactSpace};
use oreal_core::credit::{self, CreditKey, CreditTable};
use oreal_core::envsim::{ContextKey, EnvSpec, Question, Trajectory};
use oreal_core::harness::verify::pbon_masses;
use oreal_core::harness::{self, ExperimentConfig};
use oreal_core::policy::{self, PolicyTable, SparseGrad};
use oreal_core::trainer::{self, Ablation};
use oreal_core::{seed, Exec};
use rand::Rng;

const TV_TOL: f64 = 0.01;
const DRAWS: usize = 200_000;
const LEMMA_BUDGET: Duration = Duration::from_secs(30);
const NORM_TOL: f64 = 1e-9;
const KL_TOL: f64 = 1e-3;
const GRAD_ID_TOL: f64 = 1e-9;
const RATIO_TOL: f64 = 1e-12;
const FD_TOL: f64 = 1e-5;
const FD_INSTANCES: u64 = 100;
const FD_STEP: f64 = 1e-5;
const TRAIN_TARGET: f64 = 0.9;
const TRAIN_MIN_SEEDS: usize = 4;
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
// half the smallest margin observed over seeds 0..5 in the calibration run
const CREDIT_INCORRECT_MARGIN: f64 = 0.05;
const CREDIT_CORRECT_MARGIN: f64 = 0.3;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn bon_problem() -> (EnvSpec, Question, PolicyTable) {
    let (env, q) = ExperimentConfig::default().bon_problem();
    let pi = policy::randomized_policy(&env, &q, 1.0, 11).unwrap();
    (env, q, pi)
}

fn lemma_n_independence() -> Outcome {
    let env = EnvSpec::tree_path(3, 3, 3);
    let q = Question::tree_path(0, 1, 3);
    let pi = policy::randomized_policy(&env, &q, 1.0, 5).unwrap();
    let start = Instant::now();
    let mut tvs = Vec::new();
    for (i, n) in [2usize, 16].into_iter().enumerate() {
        let r = bonmath::lemma31_report(&pi, &env, &q, n, DRAWS, 100 + i as u64, Exec::default()).unwrap();
        tvs.push((n, r.tv));
    }
    let elapsed = start.elapsed();
    let passed = tvs.iter().all(|&(_, tv)| tv <= TV_TOL) && elapsed < LEMMA_BUDGET;
    outcome(
        passed,
        format!(
            "TV {tvs:?} (tol {TV_TOL}), {:.1}s (budget 30s)",
            elapsed.as_secs_f64()
        ),
    )
}

fn pbon_exactness() -> Outcome {
    let (env, q, pi) = bon_problem();
    let space = ExactSpace::new(&pi, &env, &q).unwrap();
    let mut worst_tv: f64 = 0.0;
    for n in [1usize, 2, 4, 8] {
        let r = bonmath::pbon_report(&pi, &env, &q, n, DRAWS, 200 + n as u64, Exec::default()).unwrap();
        worst_tv = worst_tv.max(r.tv);
    }
    let mut worst_norm: f64 = 0.0;
    for n in [1usize, 2, 4, 8, 16] {
        for k in 1..=9 {
            let (pos, neg) = pbon_masses(&space, k as f64 / 10.0, n).unwrap();
            worst_norm = worst_norm.max((pos + neg - 1.0).abs());
        }
    }
    let (_, neg) = pbon_masses(&space, 0.5, 4).unwrap();
    let checkpoint_err = (neg - 0.0625).abs();
    let passed = worst_tv <= TV_TOL && worst_norm <= NORM_TOL && checkpoint_err <= 1e-12;
    outcome(
        passed,
        format!("max TV {worst_tv:.2e}, max |mass-1| {worst_norm:.1e}, negative mass at p=0.5 n=4 = {neg}"),
    )
}

fn kl_closed_form() -> Outcome {
    let errs: Vec<(usize, f64)> = [2usize, 4, 8, 16]
        .iter()
        .map(|&n| {
            let quad = bonmath::uniform_bon_kl(n, 200_001);
            (n, (quad - bonmath::kl_bon(n as u64).unwrap()).abs())
        })
        .collect();
    let passed = errs.iter().all(|&(_, e)| e <= KL_TOL);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("n={n} {e:.1e}")).collect();
    outcome(
        passed,
        format!("|quadrature - formula| {} (tol {KL_TOL})", detail.join(", ")),
    )
}

fn gradient_consistency() -> Outcome {
    let (env, q, pi) = bon_problem();
    let mut worst_rel: f64 = 0.0;
    let mut worst_ratio: f64 = 0.0;
    for n in [1usize, 2, 4, 8, 16] {
        let g = bonmath::gradient_consistency_check(&pi, &env, &q, n).unwrap();
        worst_rel = worst_rel.max(g.positive_rel_err).max(g.negative_rel_err);
        worst_ratio = worst_ratio.max((g.coef_ratio - (1.0 - g.p)).abs());
    }
    let passed = worst_rel <= GRAD_ID_TOL && worst_ratio <= RATIO_TOL;
    outcome(
        passed,
        format!("max rel err {worst_rel:.1e}, max |ratio - (1-p)| {worst_ratio:.1e}"),
    )
}

// ---- finite differences ----

struct Instance {
    policy: PolicyTable,
    old: PolicyTable,
    credit: CreditTable,
    pos: Trajectory,
    neg: Trajectory,
    p_hat: f64,
    contexts: Vec<ContextKey>,
}

fn instance(k: u64) -> Instance {
    let env = EnvSpec::tree_path(3, 3, 3);
    let q = Question::tree_path(0, (k % 3) as u32, 3);
    let policy = policy::randomized_policy(&env, &q, 2.0, 1000 + k).unwrap();
    let old = policy::randomized_policy(&env, &q, 2.0, 5000 + k).unwrap();
    let mut rng = seed::rng(k, &[77]);
    let mut sample = || policy::sample_trajectory(&policy, &env, &q, &mut rng);
    let pos = sample();
    let neg = sample();
    let mut credit = CreditTable::new();
    for t in [&pos, &neg] {
        for key in credit::credit_keys(t) {
            credit.set_score(key, rng.gen_range(-3.0..3.0));
        }
    }
    let contexts = trainer::visited_contexts([&pos, &neg]);
    Instance {
        p_hat: rng.gen_range(0.05..0.95),
        policy,
        old,
        credit,
        pos,
        neg,
        contexts,
    }
}

/// `max |analytic − numeric| / max(‖numeric‖∞, 1e-12)` over every policy logit.
fn policy_fd(policy: &PolicyTable, grad: &SparseGrad, f: impl Fn(&PolicyTable) -> f64) -> f64 {
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for (ctx, row) in policy.rows() {
        for j in 0..row.len() {
            let mut plus = policy.clone();
            plus.row_mut(*ctx)[j] += FD_STEP;
            let mut minus = policy.clone();
            minus.row_mut(*ctx)[j] -= FD_STEP;
            num.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
            ana.push(grad.get(ctx, j));
        }
    }
    relative_error(&ana, &num)
}

fn relative_error(ana: &[f64], num: &[f64]) -> f64 {
    let scale = num.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    ana.iter().zip(num).fold(0.0f64, |m, (a, n)| m.max((a - n).abs())) / scale
}

fn credit_fd(credit: &CreditTable, grad: &credit::CreditGrad, f: impl Fn(&CreditTable) -> f64) -> f64 {
    let keys: Vec<CreditKey> = credit.entries().map(|(k, _)| *k).collect();
    let mut num = Vec::new();
    let mut ana = Vec::new();
    for key in keys {
        let w = credit.score(&key);
        let mut plus = credit.clone();
        plus.set_score(key, w + FD_STEP);
        let mut minus = credit.clone();
        minus.set_score(key, w - FD_STEP);
        num.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
        ana.push(grad.get(&key).copied().unwrap_or(0.0));
    }
    relative_error(&ana, &num)
}

fn finite_differences() -> Outcome {
    let beta = 0.01;
    let eta = 1.0;
    let mut worst = [0.0f64; 5];
    for k in 0..FD_INSTANCES {
        let x = instance(k);
        let g = policy::grad_logprob(&x.policy, &x.pos);
        worst[0] = worst[0].max(policy_fd(&x.policy, &g, |p| policy::logprob(p, &x.pos)));

        let reward = (k % 2) as u8;
        let (_, cg) = credit::ce_loss_and_grad(&x.credit, &x.pos, reward);
        worst[1] = worst[1].max(credit_fd(&x.credit, &cg, |c| {
            credit::ce_loss_and_grad(c, &x.pos, reward).0
        }));

        let pos = [x.pos.clone()];
        let (_, g) = trainer::loss_l1(&x.policy, &x.old, &pos, &x.contexts, beta);
        worst[2] = worst[2].max(policy_fd(&x.policy, &g, |p| {
            trainer::loss_l1(p, &x.old, &pos, &x.contexts, beta).0
        }));

        let neg = [x.neg.clone()];
        let f = [1.0 - x.p_hat];
        let (_, g) = trainer::loss_l2(&x.policy, &x.old, &neg, &f, &x.contexts, beta).unwrap();
        worst[3] = worst[3].max(policy_fd(&x.policy, &g, |p| {
            trainer::loss_l2(p, &x.old, &neg, &f, &x.contexts, beta)
                .unwrap()
                .0
        }));

        let total = |p: &PolicyTable| {
            trainer::loss_total(
                p,
                &x.old,
                &x.credit,
                &x.pos,
                &x.neg,
                x.p_hat,
                eta,
                beta,
                &x.contexts,
            )
            .unwrap()
        };
        let (_, g) = total(&x.policy);
        worst[4] = worst[4].max(policy_fd(&x.policy, &g, |p| total(p).0));
    }
    let names = [
        "grad_logprob",
        "ce_loss_and_grad",
        "loss_l1",
        "loss_l2",
        "loss_total",
    ];
    let detail: Vec<String> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect();
    outcome(
        worst.iter().all(|&w| w <= FD_TOL),
        format!("{} instances, max rel err: {}", FD_INSTANCES, detail.join(", ")),
    )
}

fn omega_algebra() -> Outcome {
    let mut ok = true;
    let steps = 400_000;
    for i in 0..=steps {
        let w = -20.0 + 40.0 * i as f64 / steps as f64;
        let (p, m) = credit::omega(w);
        let (p_neg, m_neg) = credit::omega(-w);
        ok &= p * m == 0.0;
        ok &= (0.0..1.0).contains(&p) && (0.0..1.0).contains(&m);
        ok &= (p - m_neg).abs() <= 1e-15 && (m - p_neg).abs() <= 1e-15;
    }
    outcome(ok, format!("{} grid points on [-20, 20]", steps + 1))
}

fn full_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.set_flags(Ablation::FULL);
    c.train.seed = seed;
    c
}

fn training_improvement(tmp: &Path) -> (Outcome, Vec<harness::RunSummary>) {
    let start = Instant::now();
    let summaries: Vec<_> = SEEDS
        .iter()
        .map(|&s| {
            harness::run_experiment(&full_config(s), &tmp.join(format!("train{s}")), Exec::default())
                .unwrap()
                .summary
        })
        .collect();
    let elapsed = start.elapsed();
    let hits = summaries
        .iter()
        .filter(|s| s.final_success >= TRAIN_TARGET && s.final_success > s.init_success)
        .count();
    let detail: Vec<String> = summaries
        .iter()
        .map(|s| format!("{:.3}->{:.3}", s.init_success, s.final_success))
        .collect();
    let passed = hits >= TRAIN_MIN_SEEDS && elapsed < TRAIN_BUDGET;
    (
        outcome(
            passed,
            format!(
                "{hits}/5 seeds reach >= {TRAIN_TARGET} [{}], {:.1}s (budget 300s)",
                detail.join(", "),
                elapsed.as_secs_f64()
            ),
        ),
        summaries,
    )
}

fn ablation_ordering(tmp: &Path) -> Outcome {
    let out = tmp.join("ablate");
    let r = harness::ablate(&ExperimentConfig::default(), &SEEDS, &out, Exec::default()).unwrap();
    let order: Vec<&str> = r.rows.iter().map(|row| row.variant.as_str()).collect();
    let full = r.row("oreal").unwrap().median_final_success;
    let base = r.row("reinforce").unwrap().median_final_success;
    let csv_rows = std::fs::read_to_string(out.join(harness::ablate::ABLATION_FILE))
        .unwrap()
        .lines()
        .count();
    let passed = full >= base
        && order == ["reinforce", "reward-shaping", "behavior-cloning", "oreal"]
        && csv_rows == 5;
    let lates: Vec<String> = r
        .rows
        .iter()
        .map(|row| {
            format!(
                "{} {:.3}/{:.3}",
                row.variant, row.median_final_success, row.median_late_pass_rate
            )
        })
        .collect();
    outcome(
        passed,
        format!("median final/late pass rate: {}", lates.join(", ")),
    )
}

fn credit_signal(summaries: &[harness::RunSummary]) -> Outcome {
    let margins: Vec<(f64, f64)> = summaries
        .iter()
        .map(|s| {
            let c = s.credit_signal.expect("enumerable bank");
            (c.incorrect_margin(), c.correct_margin())
        })
        .collect();
    let passed = margins
        .iter()
        .all(|&(i, c)| i >= CREDIT_INCORRECT_MARGIN && c >= CREDIT_CORRECT_MARGIN);
    let detail: Vec<String> = margins.iter().map(|(i, c)| format!("({i:.3}, {c:.3})")).collect();
    outcome(
        passed,
        format!(
            "(incorrect scratch-answer, correct answer-scratch) per seed {} vs ({CREDIT_INCORRECT_MARGIN}, {CREDIT_CORRECT_MARGIN})",
            detail.join(" ")
        ),
    )
}

fn determinism(tmp: &Path) -> Outcome {
    let config = full_config(3);
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let dirs = [tmp.join("det_a"), tmp.join("det_b"), tmp.join("det_seq")];
    harness::run_experiment(&config, &dirs[0], Exec::default()).unwrap();
    harness::run_experiment(&config, &dirs[1], Exec::default()).unwrap();
    harness::run_experiment(&config, &dirs[2], Exec::Sequential).unwrap();
    let files = [harness::run::METRICS_FILE, harness::run::SUMMARY_FILE];
    let same = files.iter().all(|f| {
        let a = read(&dirs[0], f);
        a == read(&dirs[1], f) && a == read(&dirs[2], f)
    });
    outcome(
        same,
        "metrics JSONL and summary JSON byte-identical across two runs and both exec modes".into(),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("lemma31-n-independence", lemma_n_independence()),
        ("pbon-exactness", pbon_exactness()),
        ("kl-closed-form", kl_closed_form()),
        ("gradient-consistency", gradient_consistency()),
        ("finite-differences", finite_differences()),
        ("omega-algebra", omega_algebra()),
    ];
    let (train, summaries) = training_improvement(tmp.path());
    results.push(("training-improvement", train));
    results.push(("ablation-ordering", ablation_ordering(tmp.path())));
    results.push(("credit-signal", credit_signal(&summaries)));
    results.push(("determinism", determinism(tmp.path())));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
