//! Training signals, the clipped surrogate objective, Adam, and training rounds.

mod adam;
mod objective;
mod round;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{SamplingParams, Token, TokenSequence};

pub use adam::{adam_step, AdamState};
pub use objective::{
    evaluate_objective, objective_gradient, surrogate_objective, ObjectiveTerms, CLIP_BOUNDARY_TOL,
};
pub use round::{batch_indices, train_round, RoundStats, RunState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    /// The outcome reward itself is the per-rollout signal.
    RawReward,
    /// Reward standardized within the query's rollout group (plus replay support).
    Grpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Every sampled rollout carries gradient.
    All,
    /// Only the first sampled rollout carries gradient; the rest only support its advantage.
    FirstOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Fresh rollouts sampled per query each round.
    pub rollouts_per_query: usize,
    pub gradient_mask: MaskMode,
    pub advantage_mode: AdvantageMode,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub learning_rate: f64,
    /// Passes over the round's rollouts.
    pub inner_epochs: usize,
    /// Query groups per optimizer step; 0 means the whole batch.
    pub grad_accum_chunk: usize,
    pub std_eps: f64,
    /// Replayed rewards per query joining the advantage group.
    pub replay_rollouts: usize,
    /// Per-query buffer capacity; 0 means `replay_rollouts`.
    pub replay_capacity: usize,
    /// Divide each rollout's ratio terms by its length.
    pub length_normalize: bool,
    pub temperature: f64,
    pub top_p: f64,
    /// End-of-sequence token id, or -1 for fixed-length responses.
    pub eos_token: i64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            rollouts_per_query: 1,
            gradient_mask: MaskMode::All,
            advantage_mode: AdvantageMode::RawReward,
            clip_eps: 0.2,
            kl_coeff: 0.001,
            learning_rate: 1e-2,
            inner_epochs: 1,
            grad_accum_chunk: 0,
            std_eps: 1e-8,
            replay_rollouts: 0,
            replay_capacity: 0,
            length_normalize: false,
            temperature: 1.0,
            top_p: 1.0,
            eos_token: -1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(Error::config(format!("train.{key} {why}")));
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if self.rollouts_per_query == 0 {
            return fail("rollouts_per_query", "must be at least 1");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps.is_finite()) {
            return fail("clip_eps", "must be positive");
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return fail("kl_coeff", "must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be positive");
        }
        if self.inner_epochs == 0 {
            return fail("inner_epochs", "must be at least 1");
        }
        if !(self.std_eps > 0.0 && self.std_eps.is_finite()) {
            return fail("std_eps", "must be positive");
        }
        if self.replay_rollouts > 0 && self.advantage_mode != AdvantageMode::Grpo {
            return fail("replay_rollouts", "requires advantage_mode = \"grpo\"");
        }
        if self.replay_capacity != 0 && self.replay_capacity < self.replay_rollouts {
            return fail("replay_capacity", "must be at least replay_rollouts");
        }
        if self.eos_token < -1 {
            return fail("eos_token", "must be a token id or -1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam_beta1/adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail("adam_eps", "must be positive");
        }
        self.sampling(1).map(|_| ())
    }

    pub fn sampling(&self, max_len: usize) -> Result<SamplingParams> {
        let mut sp = SamplingParams::new(self.temperature, self.top_p, max_len)?;
        sp.eos_token = u32::try_from(self.eos_token).ok();
        Ok(sp)
    }

    pub fn effective_replay_capacity(&self) -> usize {
        if self.replay_capacity == 0 {
            self.replay_rollouts
        } else {
            self.replay_capacity
        }
    }

    pub fn effective_chunk(&self) -> usize {
        if self.grad_accum_chunk == 0 {
            self.batch_size
        } else {
            self.grad_accum_chunk
        }
    }

    pub fn mask(&self, group_len: usize) -> Vec<bool> {
        (0..group_len)
            .map(|j| self.gradient_mask == MaskMode::All || j == 0)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub query_id: u64,
    pub tokens: TokenSequence,
    /// Behavior-policy log-probabilities recorded at sampling time.
    pub old_logprobs: Vec<f64>,
    pub reward: u8,
    pub round: u64,
}

impl Rollout {
    pub fn tokens(&self) -> &[Token] {
        self.tokens.tokens()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub query_id: u64,
    pub rollouts: Vec<Rollout>,
    pub gradient_mask: Vec<bool>,
}

impl RolloutGroup {
    pub fn new(query_id: u64, rollouts: Vec<Rollout>, gradient_mask: Vec<bool>) -> Result<Self> {
        if rollouts.is_empty() || rollouts.len() != gradient_mask.len() {
            return Err(Error::Contract(
                "a rollout group needs one mask entry per rollout and at least one rollout".into(),
            ));
        }
        if !gradient_mask.iter().any(|&m| m) {
            return Err(Error::Contract("gradient mask selects no rollout".into()));
        }
        if rollouts.iter().any(|r| r.query_id != query_id) {
            return Err(Error::Contract("rollouts of a group must share its query".into()));
        }
        Ok(Self {
            query_id,
            rollouts,
            gradient_mask,
        })
    }

    pub fn masked(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts
            .iter()
            .zip(&self.gradient_mask)
            .filter_map(|(r, &m)| m.then_some(r))
    }

    pub fn n_masked(&self) -> usize {
        self.gradient_mask.iter().filter(|&&m| m).count()
    }
}

/// The minimalist baseline's per-rollout signal: the reward itself.
pub fn signal_raw(reward: u8) -> f64 {
    f64::from(reward)
}

/// `(r_i − mean(r)) / (std(r) + std_eps)` with the population standard deviation.
///
/// A group whose rewards are all equal gets exactly zero advantage.
pub fn grpo_advantage(rewards: &[f64], std_eps: f64) -> Vec<f64> {
    let n = rewards.len();
    if n == 0 {
        return Vec::new();
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; n];
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt() + std_eps;
    rewards.iter().map(|r| (r - mean) / denom).collect()
}
