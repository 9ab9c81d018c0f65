//! Fixed-horizon token environments with exact outcome verification.
//!
//! Two environments are provided:
//!
//! * `SumMod`: a question `(a, b, m)` asks for `(a + b) mod m`. The policy emits
//!   `T - 1` scratch tokens followed by one answer token; only the last token
//!   is parsed.
//! * `TreePath`: a question `(shift, m)` is solved when the token sum is
//!   congruent to `answer = -shift mod m`. With `shift = 0` the reward is
//!   1 iff the token sum is divisible by `m`.
//!
//! Dynamics are deterministic: the context at step `t` is a pure function of
//! the question id, `t`, and the tokens emitted so far.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Largest trajectory space `enumerate_trajectories` will materialize.
pub const ENUMERATION_CAP: u64 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    SumMod,
    TreePath,
}

/// How much of the prefix a context key remembers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Keying {
    /// `(question, step, previous token)`.
    #[default]
    PrevToken,
    /// `(question, step, entire prefix)`; every tree node gets its own key.
    FullPrefix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub alphabet_size: u32,
    pub horizon: u32,
    /// SumMod: moduli questions are drawn from. TreePath: target moduli.
    pub moduli: Vec<u32>,
    #[serde(default)]
    pub keying: Keying,
}

impl EnvSpec {
    pub fn sum_mod(alphabet_size: u32, horizon: u32, moduli: Vec<u32>) -> Self {
        EnvSpec {
            kind: EnvKind::SumMod,
            alphabet_size,
            horizon,
            moduli,
            keying: Keying::PrevToken,
        }
    }

    pub fn tree_path(alphabet_size: u32, horizon: u32, modulus: u32) -> Self {
        EnvSpec {
            kind: EnvKind::TreePath,
            alphabet_size,
            horizon,
            moduli: vec![modulus],
            keying: Keying::PrevToken,
        }
    }

    pub fn with_keying(mut self, keying: Keying) -> Self {
        self.keying = keying;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(Error::Config(format!(
                "alphabet_size must be >= 2, got {}",
                self.alphabet_size
            )));
        }
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.moduli.is_empty() {
            return Err(Error::Config("moduli must be non-empty".into()));
        }
        for &m in &self.moduli {
            if m < 2 {
                return Err(Error::Config(format!("modulus {m} must be >= 2")));
            }
            if self.kind == EnvKind::SumMod && m > self.alphabet_size {
                return Err(Error::Config(format!(
                    "modulus {m} exceeds alphabet size {}; answer not emittable",
                    self.alphabet_size
                )));
            }
        }
        if self.keying == Keying::FullPrefix {
            let bits = f64::from(self.alphabet_size + 1).log2() * f64::from(self.horizon);
            if bits >= 63.0 {
                return Err(Error::Config(
                    "full-prefix keying does not fit in 64 bits for this alphabet/horizon".into(),
                ));
            }
        }
        Ok(())
    }

    /// `A^T`, saturating.
    pub fn trajectory_count(&self) -> u128 {
        u128::from(self.alphabet_size).saturating_pow(self.horizon)
    }

    pub fn is_enumerable(&self) -> bool {
        self.trajectory_count() <= u128::from(ENUMERATION_CAP)
    }

    /// Context key of the first step.
    pub fn initial_context(&self, question: u32) -> ContextKey {
        ContextKey {
            question,
            step: 0,
            history: 0,
        }
    }

    /// Context reached after emitting `token` in context `ctx`.
    pub fn next_context(&self, ctx: ContextKey, token: u32) -> ContextKey {
        let history = match self.keying {
            Keying::PrevToken => u64::from(token) + 1,
            Keying::FullPrefix => {
                if ctx.step == 0 {
                    u64::from(token) + 1
                } else {
                    ctx.history * (u64::from(self.alphabet_size) + 1) + u64::from(token) + 1
                }
            }
        };
        ContextKey {
            question: ctx.question,
            step: ctx.step + 1,
            history,
        }
    }

    /// Contexts visited by a token sequence (one per token).
    pub fn contexts_for(&self, question: u32, tokens: &[u32]) -> Vec<ContextKey> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut ctx = self.initial_context(question);
        for &tok in tokens {
            out.push(ctx);
            ctx = self.next_context(ctx, tok);
        }
        out
    }

    fn reward_of_tokens(&self, q: &Question, tokens: &[u32]) -> u8 {
        let hit = match self.kind {
            EnvKind::SumMod => tokens.last().copied() == Some(q.answer),
            EnvKind::TreePath => {
                let m = q.skill as u64;
                let sum: u64 = tokens.iter().map(|&t| u64::from(t)).sum();
                sum % m == u64::from(q.answer)
            }
        };
        u8::from(hit)
    }
}

/// Key of a decision point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub question: u32,
    pub step: u32,
    /// 0 at the first step; otherwise previous token + 1 (prev-token keying)
    /// or a base-(A+1) prefix code (full-prefix keying).
    pub history: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: u32,
    /// SumMod: `[a, b, m]`. TreePath: `[shift, m]`.
    pub params: Vec<u32>,
    pub answer: u32,
    pub skill: u32,
}

impl Question {
    pub fn sum_mod(id: u32, a: u32, b: u32, m: u32) -> Self {
        Question {
            id,
            params: vec![a, b, m],
            answer: (a + b) % m,
            skill: m,
        }
    }

    pub fn tree_path(id: u32, shift: u32, m: u32) -> Self {
        Question {
            id,
            params: vec![shift, m],
            answer: (m - shift % m) % m,
            skill: m,
        }
    }

    /// Recomputes `(answer, skill)` from `params` alone.
    pub fn derived(kind: EnvKind, params: &[u32]) -> Option<(u32, u32)> {
        match (kind, params) {
            (EnvKind::SumMod, &[a, b, m]) if m > 0 => Some(((a + b) % m, m)),
            (EnvKind::TreePath, &[shift, m]) if m > 0 => Some(((m - shift % m) % m, m)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question_id: u32,
    pub tokens: Vec<u32>,
    pub contexts: Vec<ContextKey>,
    pub reward: u8,
}

impl Trajectory {
    /// Builds a trajectory from tokens, filling contexts and the verified reward.
    pub fn from_tokens(env: &EnvSpec, q: &Question, tokens: Vec<u32>) -> Result<Self> {
        check_tokens(env, &tokens)?;
        let contexts = env.contexts_for(q.id, &tokens);
        let reward = env.reward_of_tokens(q, &tokens);
        Ok(Trajectory {
            question_id: q.id,
            tokens,
            contexts,
            reward,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_correct(&self) -> bool {
        self.reward == 1
    }
}

fn check_tokens(env: &EnvSpec, tokens: &[u32]) -> Result<()> {
    if tokens.len() != env.horizon as usize {
        return Err(Error::Contract(format!(
            "trajectory has {} tokens, horizon is {}",
            tokens.len(),
            env.horizon
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= env.alphabet_size) {
        return Err(Error::Contract(format!(
            "token {bad} outside alphabet of size {}",
            env.alphabet_size
        )));
    }
    Ok(())
}

/// Outcome reward of a trajectory: 1 iff the parsed answer is correct.
pub fn verify(env: &EnvSpec, q: &Question, traj: &Trajectory) -> Result<u8> {
    check_tokens(env, &traj.tokens)?;
    if traj.contexts.len() != traj.tokens.len() {
        return Err(Error::Contract(format!(
            "{} contexts for {} tokens",
            traj.contexts.len(),
            traj.tokens.len()
        )));
    }
    if traj.question_id != q.id {
        return Err(Error::Contract(format!(
            "trajectory belongs to question {}, verifying against {}",
            traj.question_id, q.id
        )));
    }
    Ok(env.reward_of_tokens(q, &traj.tokens))
}

/// All `A^T` trajectories of `q` in lexicographic token order.
pub fn enumerate_trajectories(env: &EnvSpec, q: &Question) -> Result<Vec<Trajectory>> {
    let size = env.trajectory_count();
    if size > u128::from(ENUMERATION_CAP) {
        return Err(Error::EnumerationTooLarge {
            size,
            cap: ENUMERATION_CAP,
        });
    }
    let a = env.alphabet_size;
    let horizon = env.horizon as usize;
    let mut out = Vec::with_capacity(size as usize);
    let mut tokens = vec![0u32; horizon];
    loop {
        out.push(Trajectory {
            question_id: q.id,
            contexts: env.contexts_for(q.id, &tokens),
            reward: env.reward_of_tokens(q, &tokens),
            tokens: tokens.clone(),
        });
        // odometer increment, last position fastest
        let mut pos = horizon;
        loop {
            if pos == 0 {
                return Ok(out);
            }
            pos -= 1;
            tokens[pos] += 1;
            if tokens[pos] < a {
                break;
            }
            tokens[pos] = 0;
        }
    }
}

/// Deterministic question bank; ids are `0..count`.
pub fn question_bank(env: &EnvSpec, count: usize, seed: u64) -> Result<Vec<Question>> {
    if count == 0 {
        return Err(Error::Contract("question bank must be non-empty".into()));
    }
    env.validate()?;
    let mut rng = seed::rng(seed, &[0xba2c]);
    let bank = (0..count as u32)
        .map(|id| {
            let m = env.moduli[rng.gen_range(0..env.moduli.len())];
            match env.kind {
                EnvKind::SumMod => {
                    let a = rng.gen_range(0..env.alphabet_size);
                    let b = rng.gen_range(0..env.alphabet_size);
                    Question::sum_mod(id, a, b, m)
                }
                EnvKind::TreePath => Question::tree_path(id, rng.gen_range(0..m), m),
            }
        })
        .collect();
    Ok(bank)
}

/// Writes `id,<params>,answer,skill` rows with a kind-specific header.
pub fn write_bank_csv<W: Write>(writer: W, kind: EnvKind, bank: &[Question]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    match kind {
        EnvKind::SumMod => w.write_record(["id", "a", "b", "m", "answer", "skill"])?,
        EnvKind::TreePath => w.write_record(["id", "shift", "m", "answer", "skill"])?,
    }
    for q in bank {
        let mut row = vec![q.id.to_string()];
        row.extend(q.params.iter().map(u32::to_string));
        row.push(q.answer.to_string());
        row.push(q.skill.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Creates missing parent directories.
pub fn save_bank_csv(path: &Path, kind: EnvKind, bank: &[Question]) -> Result<()> {
    let mut buf = Vec::new();
    write_bank_csv(&mut buf, kind, bank)?;
    crate::harness::write_bytes(path, &buf)
}
