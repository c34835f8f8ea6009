use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::environment::{verify, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::policy::{sample_with_scratch, PolicyParams, Scratch};
use crate::replay::{advantage_with_replay, ReplayBuffer};
use crate::rng::{self, Purpose};

use super::{
    adam_step, evaluate_objective, signal_raw, AdamState, AdvantageMode, ObjectiveTerms, Rollout,
    RolloutGroup, TrainConfig,
};

/// Everything that changes from round to round. Random streams are keyed by
/// `(seed, round)`, so this is the complete resumable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub seed: u64,
    /// Rounds completed so far.
    pub round: u64,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub optimizer: AdamState,
    pub replay: ReplayBuffer,
    pub rollouts_consumed: u64,
}

impl RunState {
    /// Uniform initial policy, which also serves as the KL reference.
    pub fn new(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Self {
        let params = PolicyParams::for_map(&ds.feature_map);
        Self {
            seed,
            round: 0,
            reference: params.clone(),
            optimizer: AdamState::new(params.len(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            params,
            replay: ReplayBuffer::new(cfg.effective_replay_capacity()),
            rollouts_consumed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    /// 1-based index of the round just completed.
    pub round: u64,
    pub mean_reward: f64,
    /// Objective summed over the first pass's optimizer steps.
    pub objective: f64,
    /// Mean KL to the reference per gradient-bearing rollout (first pass).
    pub kl: f64,
    pub clip_fraction: f64,
    pub rollouts_sampled: usize,
    pub gradient_rollouts: usize,
    /// Mean age in rounds of the replayed rewards used this round.
    pub mean_replay_age: f64,
}

/// Train-split indices for round `round`: epochs are seeded shuffles of the
/// train split, cut into `n_train / batch` disjoint batches (the remainder of
/// each epoch is dropped), so no query repeats within a round.
pub fn batch_indices(seed: u64, round: u64, n_train: usize, batch: usize) -> Vec<usize> {
    let per_epoch = (n_train / batch).max(1) as u64;
    let epoch = round / per_epoch;
    let slot = (round % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n_train).collect();
    perm.shuffle(&mut rng::stream(seed, Purpose::Shuffle, epoch, 0, 0));
    perm[slot * batch..(slot + 1) * batch].to_vec()
}

/// Runs one training round: sample, verify, compute signals, update.
pub fn train_round(
    state: &mut RunState,
    ds: &Dataset,
    cfg: &TrainConfig,
    mode: ExecMode,
) -> Result<RoundStats> {
    let b = cfg.batch_size;
    let g = cfg.rollouts_per_query;
    if b > ds.train.len() {
        return Err(Error::config(format!(
            "train.batch_size {b} exceeds the {} train queries",
            ds.train.len()
        )));
    }
    state.params.check_map(&ds.feature_map)?;
    let sp = cfg.sampling(ds.response_len)?;
    let round = state.round;
    let seed = state.seed;
    let batch = batch_indices(seed, round, ds.train.len(), b);

    // Sampling: one independent stream per (round, slot, rollout).
    let params = &state.params;
    let rollouts: Vec<Rollout> = exec::map_indexed(mode, b * g, |idx| {
        let (i, j) = (idx / g, idx % g);
        let query = &ds.train[batch[i]];
        let mut rng = rng::stream(seed, Purpose::Rollout, round, i as u64, j as u64);
        let resp = sample_with_scratch(params, &ds.feature_map, query, &sp, &mut rng, &mut Scratch::default());
        Rollout {
            query_id: query.id,
            reward: verify(query, &resp.tokens),
            tokens: resp.tokens,
            old_logprobs: resp.logprobs,
            round,
        }
    });
    let reward_sum: u64 = rollouts.iter().map(|r| u64::from(r.reward)).sum();

    let mut groups = Vec::with_capacity(b);
    let mut signals = Vec::with_capacity(b * g);
    let mut ages = (0u64, 0u64);
    let mut iter = rollouts.into_iter();
    for &qi in &batch {
        let rs: Vec<Rollout> = iter.by_ref().take(g).collect();
        let qid = ds.train[qi].id;
        let mask = cfg.mask(g);
        match cfg.advantage_mode {
            AdvantageMode::RawReward => {
                signals.extend(rs.iter().zip(&mask).filter(|(_, &m)| m).map(|(r, _)| signal_raw(r.reward)));
            }
            AdvantageMode::Grpo => {
                let current: Vec<f64> = rs.iter().map(|r| f64::from(r.reward)).collect();
                let replayed: Vec<f64> = state
                    .replay
                    .recent(qid, cfg.replay_rollouts)
                    .map(|e| {
                        ages.0 += round - e.round;
                        ages.1 += 1;
                        f64::from(e.reward)
                    })
                    .collect();
                let adv = advantage_with_replay(&current, &replayed, cfg.std_eps);
                signals.extend(adv.iter().zip(&mask).filter(|(_, &m)| m).map(|(a, _)| *a));
            }
        }
        groups.push(RolloutGroup::new(qid, rs, mask)?);
    }
    // Current rewards only support later rounds.
    if cfg.replay_rollouts > 0 {
        for grp in &groups {
            let rewards: Vec<u8> = grp.rollouts.iter().map(|r| r.reward).collect();
            state.replay.push(grp.query_id, &rewards, round);
        }
    }

    let chunk = cfg.effective_chunk();
    let mut offsets = Vec::with_capacity(groups.len().div_ceil(chunk) + 1);
    offsets.push(0usize);
    for c in groups.chunks(chunk) {
        offsets.push(offsets.last().unwrap() + c.iter().map(RolloutGroup::n_masked).sum::<usize>());
    }
    let mut first_pass = ObjectiveTerms::default();
    let (mut clipped, mut tokens) = (0usize, 0usize);
    for epoch in 0..cfg.inner_epochs {
        for (ci, c) in groups.chunks(chunk).enumerate() {
            let sigs = &signals[offsets[ci]..offsets[ci + 1]];
            let (terms, grad) = evaluate_objective(
                &state.params,
                &state.reference,
                ds,
                c,
                sigs,
                cfg,
                true,
                mode,
            )?;
            if epoch == 0 {
                first_pass.value += terms.value;
                first_pass.kl += terms.kl;
                first_pass.rollouts += terms.rollouts;
            }
            clipped += terms.clipped_tokens;
            tokens += terms.tokens;
            adam_step(
                &mut state.optimizer,
                &mut state.params,
                &grad.expect("gradient requested"),
                cfg.learning_rate,
            )?;
        }
    }

    state.round += 1;
    state.rollouts_consumed += (b * g) as u64;
    Ok(RoundStats {
        round: state.round,
        mean_reward: reward_sum as f64 / (b * g) as f64,
        objective: first_pass.value,
        kl: first_pass.kl / first_pass.rollouts.max(1) as f64,
        clip_fraction: if tokens == 0 { 0.0 } else { clipped as f64 / tokens as f64 },
        rollouts_sampled: b * g,
        gradient_rollouts: signals.len(),
        mean_replay_age: if ages.1 == 0 { 0.0 } else { ages.0 as f64 / ages.1 as f64 },
    })
}
