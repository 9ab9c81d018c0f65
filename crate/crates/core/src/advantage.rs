//! Group-level reward post-processing.

use serde::{Deserialize, Serialize};

use crate::envsim::Trajectory;
use crate::error::{Error, Result};

/// Which post-processing supplies the negative-sample weight `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMode {
    /// `F = 1 − p̂`, the BoN-consistent shaping factor.
    #[default]
    Shaped,
    /// `F = −A_RLOO(y−)`.
    Rloo,
    /// `F = −A_GRPO(y−)`.
    Grpo,
}

impl std::str::FromStr for AdvantageMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shaped" => Ok(AdvantageMode::Shaped),
            "rloo" => Ok(AdvantageMode::Rloo),
            "grpo" => Ok(AdvantageMode::Grpo),
            other => Err(Error::Config(format!("unknown advantage mode `{other}`"))),
        }
    }
}

/// K rollouts of one question with their outcome statistics.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub question_id: u32,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<u8>,
    pub pass_rate: f64,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(question_id: u32, trajectories: Vec<Trajectory>) -> Self {
        let rewards: Vec<u8> = trajectories.iter().map(|t| t.reward).collect();
        let pass_rate = mean_reward(&rewards);
        RolloutGroup {
            question_id,
            trajectories,
            rewards,
            pass_rate,
            advantages: Vec::new(),
        }
    }

    /// All-correct or all-wrong groups carry no contrastive signal.
    pub fn is_degenerate(&self) -> bool {
        self.pass_rate <= 0.0 || self.pass_rate >= 1.0
    }

    /// Fills `advantages` with the per-sample values of `mode`.
    /// `Shaped` gives positives 1 and negatives `−(1 − p̂)`.
    pub fn assign(&mut self, mode: AdvantageMode) -> Result<()> {
        self.advantages = match mode {
            AdvantageMode::Shaped => {
                let shape = shape_negative_coefficient(self.pass_rate)?;
                self.rewards
                    .iter()
                    .map(|&r| if r == 1 { 1.0 } else { -shape })
                    .collect()
            }
            AdvantageMode::Rloo => rloo_advantages(&self.rewards)?,
            AdvantageMode::Grpo => grpo_standardize(&self.rewards)?,
        };
        Ok(())
    }

    /// Weight `F` for the negative at `index`; positive when it should be pushed down.
    pub fn negative_weight(&self, index: usize) -> f64 {
        -self.advantages[index]
    }
}

fn mean_reward(rewards: &[u8]) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / rewards.len() as f64
}

/// `1 − p̂`: multiplier on the negative-sample term.
pub fn shape_negative_coefficient(p_hat: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_hat) {
        return Err(Error::Contract(format!("pass rate {p_hat} outside [0, 1]")));
    }
    Ok(1.0 - p_hat)
}

/// `R(s) − mean of the other K−1 rewards`.
pub fn rloo_advantages(rewards: &[u8]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Domain(format!("RLOO needs K >= 2, got {k}")));
    }
    let total: f64 = rewards.iter().map(|&r| f64::from(r)).sum();
    Ok(rewards
        .iter()
        .map(|&r| {
            let r = f64::from(r);
            r - (total - r) / (k - 1) as f64
        })
        .collect())
}

/// `(r − mean) / std` with the population standard deviation.
pub fn grpo_standardize(rewards: &[u8]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < 2 {
        return Err(Error::Domain(format!("GRPO needs K >= 2, got {k}")));
    }
    let mean = mean_reward(rewards);
    let var = rewards
        .iter()
        .map(|&r| (f64::from(r) - mean).powi(2))
        .sum::<f64>()
        / k as f64;
    if var <= 0.0 {
        return Err(Error::Degenerate("all rewards equal; std is zero".into()));
    }
    let std = var.sqrt();
    Ok(rewards.iter().map(|&r| (f64::from(r) - mean) / std).collect())
}

/// Per-step advantages `A_t` with their discount.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSeq {
    pub values: Vec<f64>,
    pub gamma: f64,
}

impl AdvantageSeq {
    /// `A_t = V_{t+1} − V_t`.
    pub fn from_values(values: &[f64], gamma: f64) -> Self {
        AdvantageSeq {
            values: values.windows(2).map(|w| w[1] - w[0]).collect(),
            gamma,
        }
    }

    /// `Σ_t γ^t A_t`.
    pub fn discounted_sum(&self) -> f64 {
        let mut discount = 1.0;
        let mut total = 0.0;
        for a in &self.values {
            total += discount * a;
            discount *= self.gamma;
        }
        total
    }
}

/// Aggregated return `Σ_t γ^t A_t`; with `γ = 1` this is `V_T − V_0`.
pub fn telescope_return(advs: &AdvantageSeq, values: &[f64]) -> Result<f64> {
    if advs.values.len() + 1 != values.len() {
        return Err(Error::Contract(format!(
            "{} advantages for {} values",
            advs.values.len(),
            values.len()
        )));
    }
    Ok(advs.discounted_sum())
}

/// Sequence reward `V_0 + Σ_t γ^t A_t`.
pub fn sequence_reward(v0: f64, advs: &AdvantageSeq) -> f64 {
    v0 + advs.discounted_sum()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bradley-Terry preference `σ(r1 − r2)`.
pub fn win_rate(r1: f64, r2: f64) -> f64 {
    sigmoid(r1 - r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn shaping_coefficient() {
        assert_eq!(shape_negative_coefficient(0.75).unwrap(), 0.25);
        assert_eq!(shape_negative_coefficient(1.0).unwrap(), 0.0);
        assert_eq!(shape_negative_coefficient(0.0).unwrap(), 1.0);
        assert!(shape_negative_coefficient(1.5).is_err());
        assert!(shape_negative_coefficient(-0.1).is_err());
    }

    #[test]
    fn rloo_examples() {
        let a = rloo_advantages(&[1, 0, 0, 1]).unwrap();
        let want = [2.0 / 3.0, -2.0 / 3.0, -2.0 / 3.0, 2.0 / 3.0];
        for (x, y) in a.iter().zip(want) {
            assert_abs_diff_eq!(*x, y, epsilon = 1e-15);
        }
        assert_eq!(rloo_advantages(&[1, 1, 1]).unwrap(), vec![0.0; 3]);
        assert!(rloo_advantages(&[1]).is_err());
    }

    #[test]
    fn grpo_examples() {
        assert_eq!(
            grpo_standardize(&[1, 1, 0, 0]).unwrap(),
            vec![1.0, 1.0, -1.0, -1.0]
        );
        assert_eq!(grpo_standardize(&[1, 0]).unwrap(), vec![1.0, -1.0]);
        assert!(matches!(grpo_standardize(&[1, 1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn telescope_examples() {
        let v = [0.2, 0.5, 0.9];
        let a = AdvantageSeq::from_values(&v, 1.0);
        assert_abs_diff_eq!(a.values[0], 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(a.values[1], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(telescope_return(&a, &v).unwrap(), 0.7, epsilon = 1e-15);
        let c = [0.4; 5];
        assert_eq!(
            telescope_return(&AdvantageSeq::from_values(&c, 1.0), &c).unwrap(),
            0.0
        );
        assert!(telescope_return(&a, &v[..2]).is_err());
    }

    #[test]
    fn win_rate_examples() {
        assert_eq!(win_rate(0.3, 0.3), 0.5);
        assert_abs_diff_eq!(win_rate(3f64.ln(), 0.0), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn shaped_group_weights() {
        let env = crate::envsim::EnvSpec::tree_path(2, 1, 2);
        let q = crate::envsim::Question::tree_path(0, 0, 2);
        let trajs = [0, 1, 1, 1]
            .iter()
            .map(|&t| Trajectory::from_tokens(&env, &q, vec![t]).unwrap())
            .collect();
        let mut g = RolloutGroup::new(0, trajs);
        assert_eq!(g.pass_rate, 0.25);
        g.assign(AdvantageMode::Shaped).unwrap();
        assert_eq!(g.negative_weight(1), 0.75);
        g.assign(AdvantageMode::Rloo).unwrap();
        assert_abs_diff_eq!(g.negative_weight(1), 1.0 / 3.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn rloo_sums_to_zero(rewards in proptest::collection::vec(0u8..=1, 2..64)) {
            let s: f64 = rloo_advantages(&rewards).unwrap().iter().sum();
            prop_assert!(s.abs() <= 1e-12);
        }

        #[test]
        fn grpo_is_standardized(rewards in proptest::collection::vec(0u8..=1, 2..64)) {
            prop_assume!(rewards.contains(&1) && rewards.contains(&0));
            let a = grpo_standardize(&rewards).unwrap();
            let k = a.len() as f64;
            let mean = a.iter().sum::<f64>() / k;
            let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / k;
            prop_assert!(mean.abs() < 1e-12);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn telescoping_is_exact(values in proptest::collection::vec(-10.0f64..10.0, 2..40)) {
            let a = AdvantageSeq::from_values(&values, 1.0);
            let s = telescope_return(&a, &values).unwrap();
            prop_assert!((s - (values[values.len() - 1] - values[0])).abs() <= 1e-12);
        }

        #[test]
        fn win_rate_is_symmetric(a in -50.0f64..50.0, b in -50.0f64..50.0) {
            prop_assert!((win_rate(a, b) + win_rate(b, a) - 1.0).abs() <= 1e-12);
        }
    }
}
