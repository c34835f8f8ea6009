//! Per-query replay of recent rollout rewards.
//!
//! Replayed rewards only enlarge the group over which advantages are
//! normalized. They never carry gradient and never enter ratio terms, so the
//! buffers store rewards (and the round they were observed in) but no tokens.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::learner::grpo_advantage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub reward: u8,
    pub round: u64,
}

/// Batch size, current rollouts per query, replayed rollouts per query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayTuple {
    pub batch_size: usize,
    pub current: usize,
    pub replay: usize,
}

impl ReplayTuple {
    pub fn new(batch_size: usize, current: usize, replay: usize) -> Option<Self> {
        (batch_size >= 1 && current >= 1).then_some(Self {
            batch_size,
            current,
            replay,
        })
    }

    pub fn group_size(&self) -> usize {
        self.current + self.replay
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    buffers: BTreeMap<u64, VecDeque<ReplayEntry>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            buffers: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends `rewards` observed for `query_id` in `round`, evicting the oldest
    /// entries beyond capacity. The query's buffer is created on first use.
    pub fn push(&mut self, query_id: u64, rewards: &[u8], round: u64) {
        if self.capacity == 0 {
            return;
        }
        let buf = self.buffers.entry(query_id).or_default();
        for &reward in rewards {
            if buf.len() == self.capacity {
                buf.pop_front();
            }
            buf.push_back(ReplayEntry { reward, round });
        }
    }

    /// The `k` most recent rewards for `query_id`, oldest first. Shorter during warm-up.
    pub fn support_set(&self, query_id: u64, k: usize) -> Vec<u8> {
        self.recent(query_id, k).map(|e| e.reward).collect()
    }

    /// The `k` most recent entries for `query_id`, oldest first.
    pub fn recent(&self, query_id: u64, k: usize) -> impl Iterator<Item = &ReplayEntry> {
        let buf = self.buffers.get(&query_id);
        let len = buf.map_or(0, VecDeque::len);
        buf.into_iter().flat_map(move |b| b.iter().skip(len - k.min(len)))
    }

    pub fn len(&self, query_id: u64) -> usize {
        self.buffers.get(&query_id).map_or(0, VecDeque::len)
    }

    pub fn n_queries(&self) -> usize {
        self.buffers.len()
    }
}

/// Group-normalized advantages of the `current` rewards, with `replayed`
/// rewards joining the normalization group.
///
/// Exactly the first `current.len()` entries of
/// `grpo_advantage(current ++ replayed)`.
pub fn advantage_with_replay(current: &[f64], replayed: &[f64], std_eps: f64) -> Vec<f64> {
    let mut union = Vec::with_capacity(current.len() + replayed.len());
    union.extend_from_slice(current);
    union.extend_from_slice(replayed);
    let mut adv = grpo_advantage(&union, std_eps);
    adv.truncate(current.len());
    adv
}
