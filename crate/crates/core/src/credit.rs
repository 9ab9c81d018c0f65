//! Token-level reward model trained from binary outcomes.
//!
//! A score `w` is stored per (context, emitted token), i.e. per prefix
//! `s≤t` including the token at `t`. The sequence-level success probability
//! is `σ(mean_t w_t)` and the table is fit with binary cross-entropy
//! against the verifier's outcome. Unseen prefixes score 0, so a fresh
//! table yields `ω+ = ω− = 0` everywhere.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::advantage::sigmoid;
use crate::checkpoint;
use crate::envsim::{ContextKey, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CreditKey {
    pub context: ContextKey,
    pub token: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CreditTable {
    scores: BTreeMap<CreditKey, f64>,
}

pub type CreditGrad = BTreeMap<CreditKey, f64>;

impl CreditTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn score(&self, key: &CreditKey) -> f64 {
        self.scores.get(key).copied().unwrap_or(0.0)
    }

    pub fn set_score(&mut self, key: CreditKey, w: f64) {
        self.scores.insert(key, w);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&CreditKey, f64)> {
        self.scores.iter().map(|(k, v)| (k, *v))
    }

    /// `w −= lr · grad`.
    pub fn descend(&mut self, grad: &CreditGrad, lr: f64) {
        for (k, g) in grad {
            *self.scores.entry(*k).or_insert(0.0) -= lr * g;
        }
    }

    pub fn to_checkpoint_string(&self) -> String {
        let table = checkpoint::Table {
            width: 1,
            rows: self
                .scores
                .iter()
                .map(|(k, v)| {
                    let mut key = checkpoint::context_fields(&k.context).to_vec();
                    key.push(u64::from(k.token));
                    (key, vec![*v])
                })
                .collect(),
        };
        checkpoint::render("credit-table", 4, &table)
    }

    pub fn from_checkpoint_str(text: &str, path: &Path) -> Result<Self> {
        let table = checkpoint::parse("credit-table", 4, text, path)?;
        if table.width != 1 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("credit table width must be 1, got {}", table.width),
            });
        }
        let mut out = CreditTable::new();
        for (key, values) in table.rows {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                msg: format!("key out of range: {key:?}"),
            };
            let context = checkpoint::context_from_fields(&key).ok_or_else(bad)?;
            let token = u32::try_from(key[3]).map_err(|_| bad())?;
            out.scores.insert(CreditKey { context, token }, values[0]);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_checkpoint_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&checkpoint::read_file(path)?, path)
    }
}

pub fn credit_keys(traj: &Trajectory) -> impl Iterator<Item = CreditKey> + '_ {
    traj.contexts.iter().zip(&traj.tokens).map(|(c, &t)| CreditKey {
        context: *c,
        token: t,
    })
}

/// `w_t` for each step of `traj`.
pub fn token_scores(credit: &CreditTable, traj: &Trajectory) -> Vec<f64> {
    credit_keys(traj).map(|k| credit.score(&k)).collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `p(s) = σ(mean_t w_t)`.
pub fn sequence_success_prob(credit: &CreditTable, traj: &Trajectory) -> f64 {
    sigmoid(mean(&token_scores(credit, traj)))
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binary cross-entropy of the sequence prediction and its gradient.
/// Each visited score receives `(p(s) − r)/T`, summed over repeat visits.
pub fn ce_loss_and_grad(credit: &CreditTable, traj: &Trajectory, reward: u8) -> (f64, CreditGrad) {
    let mut grad = CreditGrad::new();
    let loss = accumulate_ce(credit, traj, reward, 1.0, &mut grad);
    (loss, grad)
}

fn accumulate_ce(
    credit: &CreditTable,
    traj: &Trajectory,
    reward: u8,
    scale: f64,
    grad: &mut CreditGrad,
) -> f64 {
    let scores = token_scores(credit, traj);
    let t = scores.len() as f64;
    let z = mean(&scores);
    let r = f64::from(reward);
    // −[r log σ(z) + (1−r) log(1−σ(z))] = softplus(z) − r z
    let loss = softplus(z) - r * z;
    let g = (sigmoid(z) - r) / t;
    for key in credit_keys(traj) {
        *grad.entry(key).or_insert(0.0) += scale * g;
    }
    loss
}

/// Mean cross-entropy over a labelled batch.
pub fn batch_ce_loss(credit: &CreditTable, batch: &[(Trajectory, u8)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    batch
        .iter()
        .map(|(t, r)| ce_loss_and_grad(credit, t, *r).0)
        .sum::<f64>()
        / batch.len() as f64
}

/// One gradient-descent step on the batch-mean cross-entropy.
/// Gradients are summed over the whole batch before being applied.
pub fn credit_update(credit: &mut CreditTable, batch: &[(Trajectory, u8)], lr: f64) -> Result<f64> {
    if !(lr > 0.0) {
        return Err(Error::Domain(format!(
            "credit learning rate must be positive, got {lr}"
        )));
    }
    if batch.is_empty() {
        return Ok(0.0);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = CreditGrad::new();
    let mut loss = 0.0;
    for (traj, r) in batch {
        loss += scale * accumulate_ce(credit, traj, *r, scale, &mut grad);
    }
    credit.descend(&grad, lr);
    Ok(loss)
}

/// Clipped positive / negative token weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeights {
    pub omega_plus: Vec<f64>,
    pub omega_minus: Vec<f64>,
}

/// `ω+ = max(2σ(w) − 1, 0)`, `ω− = max(1 − 2σ(w), 0)`.
pub fn omega(w: f64) -> (f64, f64) {
    let s = sigmoid(w);
    ((2.0 * s - 1.0).max(0.0), (1.0 - 2.0 * s).max(0.0))
}

pub fn omega_weights(w_scores: &[f64]) -> TokenWeights {
    let (omega_plus, omega_minus) = w_scores.iter().map(|&w| omega(w)).unzip();
    TokenWeights {
        omega_plus,
        omega_minus,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub traj_id: usize,
    pub step: usize,
    pub token: u32,
    pub w: f64,
    pub score01: f64,
}

/// One row per token of every trajectory; `score01 = σ(w)`.
pub fn emit_token_heatmap(credit: &CreditTable, trajs: &[Trajectory]) -> Vec<HeatmapRow> {
    trajs
        .iter()
        .enumerate()
        .flat_map(|(id, traj)| {
            token_scores(credit, traj)
                .into_iter()
                .zip(&traj.tokens)
                .enumerate()
                .map(move |(step, (w, &token))| HeatmapRow {
                    traj_id: id,
                    step,
                    token,
                    w,
                    score01: sigmoid(w),
                })
        })
        .collect()
}

pub fn write_heatmap_csv<W: Write>(writer: W, rows: &[HeatmapRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Mean `σ(w)` split by outcome and by position. The answer position is the
/// last step; every earlier step is scratch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PositionScores {
    pub correct_answer: f64,
    pub correct_scratch: f64,
    pub incorrect_answer: f64,
    pub incorrect_scratch: f64,
    pub correct_count: usize,
    pub incorrect_count: usize,
}

impl PositionScores {
    /// `scratch − answer` on incorrect trajectories.
    pub fn incorrect_margin(&self) -> f64 {
        self.incorrect_scratch - self.incorrect_answer
    }

    /// `answer − scratch` on correct trajectories.
    pub fn correct_margin(&self) -> f64 {
        self.correct_answer - self.correct_scratch
    }
}

/// Requires trajectories of length at least 2 so both positions exist.
pub fn position_scores(credit: &CreditTable, trajs: &[Trajectory]) -> Result<PositionScores> {
    // [answer sum, scratch sum, scratch count, trajectories] per outcome
    let mut acc = [[0.0f64; 4]; 2];
    for traj in trajs {
        if traj.len() < 2 {
            return Err(Error::Contract("position scores need horizon >= 2".into()));
        }
        let s: Vec<f64> = token_scores(credit, traj).into_iter().map(sigmoid).collect();
        let (last, scratch) = s.split_last().expect("non-empty");
        let a = &mut acc[usize::from(traj.reward)];
        a[0] += last;
        a[1] += scratch.iter().sum::<f64>();
        a[2] += scratch.len() as f64;
        a[3] += 1.0;
    }
    let ratio = |x: f64, n: f64| if n > 0.0 { x / n } else { f64::NAN };
    Ok(PositionScores {
        correct_answer: ratio(acc[1][0], acc[1][3]),
        correct_scratch: ratio(acc[1][1], acc[1][2]),
        incorrect_answer: ratio(acc[0][0], acc[0][3]),
        incorrect_scratch: ratio(acc[0][1], acc[0][2]),
        correct_count: acc[1][3] as usize,
        incorrect_count: acc[0][3] as usize,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim::{EnvSpec, Question};
    use approx::assert_abs_diff_eq;

    fn env() -> EnvSpec {
        EnvSpec::sum_mod(5, 3, vec![5])
    }

    fn traj(tokens: Vec<u32>) -> Trajectory {
        let q = Question::sum_mod(0, 1, 1, 5);
        Trajectory::from_tokens(&env(), &q, tokens).unwrap()
    }

    #[test]
    fn fresh_table_is_neutral() {
        let c = CreditTable::new();
        let t = traj(vec![0, 1, 2]);
        assert_eq!(token_scores(&c, &t), vec![0.0; 3]);
        assert_eq!(sequence_success_prob(&c, &t), 0.5);
        let wts = omega_weights(&token_scores(&c, &t));
        assert!(wts.omega_plus.iter().chain(&wts.omega_minus).all(|&w| w == 0.0));
        assert!(emit_token_heatmap(&c, &[t]).iter().all(|r| r.score01 == 0.5));
    }

    #[test]
    fn success_prob_examples() {
        let mut c = CreditTable::new();
        let t = traj(vec![0, 1, 2]);
        for k in credit_keys(&t) {
            c.set_score(k, 3f64.ln());
        }
        assert_abs_diff_eq!(sequence_success_prob(&c, &t), 0.75, epsilon = 1e-15);
        let before = sequence_success_prob(&c, &t);
        let k = credit_keys(&t).nth(1).unwrap();
        c.set_score(k, c.score(&k) + 0.1);
        assert!(sequence_success_prob(&c, &t) > before);
    }

    #[test]
    fn ce_at_zero_scores() {
        let c = CreditTable::new();
        let t = traj(vec![0, 1, 2]);
        let (loss, grad) = ce_loss_and_grad(&c, &t, 1);
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-15);
        for g in grad.values() {
            assert_abs_diff_eq!(*g, -0.5 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn ce_gradient_vanishes_at_target() {
        let mut c = CreditTable::new();
        let t = traj(vec![0, 1, 2]);
        for k in credit_keys(&t) {
            c.set_score(k, 20.0);
        }
        let p = sequence_success_prob(&c, &t);
        assert!((1.0 - p) < 1e-6);
        let (_, grad) = ce_loss_and_grad(&c, &t, 1);
        assert!(grad.values().all(|g| g.abs() < 1e-6 / 3.0));
    }

    #[test]
    fn ce_gradient_is_shared_across_tokens() {
        let mut c = CreditTable::new();
        let t = traj(vec![3, 3, 3]);
        let keys: Vec<_> = credit_keys(&t).collect();
        c.set_score(keys[0], 0.4);
        let (_, g) = ce_loss_and_grad(&c, &t, 0);
        let z = 0.4 / 3.0;
        for k in keys {
            assert_abs_diff_eq!(g[&k], sigmoid(z) / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn omega_examples() {
        assert_eq!(omega(0.0), (0.0, 0.0));
        let (p, m) = omega(3f64.ln());
        assert_abs_diff_eq!(p, 0.5, epsilon = 1e-15);
        assert_eq!(m, 0.0);
        let (p, m) = omega(-(3f64.ln()));
        assert_eq!(p, 0.0);
        assert_abs_diff_eq!(m, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn omega_grid_algebra() {
        let n = 400_001;
        for i in 0..n {
            let w = -20.0 + 40.0 * i as f64 / (n - 1) as f64;
            let (p, m) = omega(w);
            assert_eq!(p * m, 0.0);
            assert!((0.0..1.0).contains(&p) && (0.0..1.0).contains(&m));
            let (p2, m2) = omega(-w);
            assert_abs_diff_eq!(p, m2, epsilon = 1e-15);
            assert_abs_diff_eq!(m, p2, epsilon = 1e-15);
        }
    }

    #[test]
    fn update_descends_and_empty_is_noop() {
        let mut c = CreditTable::new();
        let before = c.clone();
        credit_update(&mut c, &[], 0.5).unwrap();
        assert_eq!(c, before);
        assert!(credit_update(&mut c, &[], 0.0).is_err());

        let batch = vec![
            (traj(vec![0, 1, 2]), 1),
            (traj(vec![0, 1, 3]), 0),
            (traj(vec![4, 4, 2]), 1),
            (traj(vec![4, 0, 0]), 0),
        ];
        let mut last = batch_ce_loss(&c, &batch);
        for _ in 0..100 {
            credit_update(&mut c, &batch, 0.5).unwrap();
            let now = batch_ce_loss(&c, &batch);
            assert!(now <= last + 1e-15);
            last = now;
        }
        for (t, r) in &batch {
            let m = mean(&token_scores(&c, t));
            if *r == 1 {
                assert!(m > 0.0);
            } else {
                assert!(m < 0.0);
            }
        }
    }

    #[test]
    fn repeated_positive_drives_probability_up() {
        let mut c = CreditTable::new();
        let t = traj(vec![1, 2, 2]);
        let batch = [(t.clone(), 1)];
        let mut last = sequence_success_prob(&c, &t);
        for _ in 0..50 {
            credit_update(&mut c, &batch, 1.0).unwrap();
            let p = sequence_success_prob(&c, &t);
            assert!(p > last);
            last = p;
        }
    }

    #[test]
    fn shared_prefix_moves_less_than_divergent_suffix() {
        let good = traj(vec![1, 3, 2]);
        let bad = traj(vec![1, 3, 0]);
        let batch = [(good.clone(), 1), (bad.clone(), 0)];
        let mut c = CreditTable::new();
        for _ in 0..200 {
            credit_update(&mut c, &batch, 0.5).unwrap();
        }
        let g = token_scores(&c, &good);
        let b = token_scores(&c, &bad);
        let shared = g[0].abs().max(g[1].abs());
        assert!(shared < g[2].abs());
        assert!(shared < b[2].abs());
        assert!(g[2] > 0.0 && b[2] < 0.0);
    }

    #[test]
    fn heatmap_rows_and_checkpoint() {
        let mut c = CreditTable::new();
        let t1 = traj(vec![1, 3, 2]);
        let t2 = traj(vec![0, 0, 0]);
        credit_update(&mut c, &[(t1.clone(), 1), (t2.clone(), 0)], 0.7).unwrap();
        let rows = emit_token_heatmap(&c, &[t1, t2]);
        assert_eq!(rows.len(), 6);
        let mut buf = Vec::new();
        write_heatmap_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("traj_id,step,token,w,score01\n"));

        let ckpt = c.to_checkpoint_string();
        let back = CreditTable::from_checkpoint_str(&ckpt, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_checkpoint_string(), ckpt);
    }

    #[test]
    fn position_scores_split_last_step() {
        let mut c = CreditTable::new();
        let good = traj(vec![0, 0, 2]);
        let bad = traj(vec![0, 0, 3]);
        let keys: Vec<_> = credit_keys(&bad).collect();
        c.set_score(keys[2], -2.0);
        let ps = position_scores(&c, &[good.clone(), bad]).unwrap();
        assert_eq!(ps.correct_count, 1);
        assert_eq!(ps.incorrect_count, 1);
        assert_eq!(ps.incorrect_scratch, 0.5);
        assert_abs_diff_eq!(ps.incorrect_answer, sigmoid(-2.0), epsilon = 1e-15);
        assert!(ps.incorrect_margin() > 0.0);
        assert_eq!(ps.correct_margin(), 0.0);
        let short = Trajectory::from_tokens(
            &EnvSpec::sum_mod(5, 1, vec![5]),
            &Question::sum_mod(0, 1, 1, 5),
            vec![2],
        )
        .unwrap();
        assert!(position_scores(&c, &[short]).is_err());
    }
}
