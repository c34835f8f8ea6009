#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rftlab_core::environment::{Dataset, FeatureKind, FeatureMap, Query, TaskFamily};
use rftlab_core::learner::{
    evaluate_objective, grpo_advantage, signal_raw, AdvantageMode, Rollout, RolloutGroup,
    TrainConfig,
};
use rftlab_core::exec::ExecMode;
use rftlab_core::policy::{sample_response, PolicyParams, SamplingParams, Token, TokenSequence};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dataset with explicit queries (all in the train split).
pub fn dataset(map: FeatureMap, queries: Vec<Query>) -> Dataset {
    Dataset {
        family: if map.response_len() == 1 {
            TaskFamily::ContextualBandit
        } else {
            TaskFamily::SequenceReasoning
        },
        vocab_size: map.vocab_size(),
        response_len: map.response_len(),
        query_dim: queries[0].features.len(),
        train: queries,
        test: vec![],
        feature_map: map,
    }
}

pub fn random_params(map: &FeatureMap, rng: &mut impl Rng, scale: f64) -> PolicyParams {
    let w = (0..map.dim() * map.vocab_size())
        .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    PolicyParams::from_weights(map.dim(), map.vocab_size(), w).unwrap()
}

pub fn perturbed(p: &PolicyParams, rng: &mut impl Rng, scale: f64) -> PolicyParams {
    let w = p
        .weights()
        .iter()
        .map(|x| x + scale * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    PolicyParams::from_weights(p.feature_dim(), p.vocab_size(), w).unwrap()
}

pub struct Instance {
    pub ds: Dataset,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub groups: Vec<RolloutGroup>,
    pub signals: Vec<f64>,
    pub cfg: TrainConfig,
}

impl Instance {
    pub fn value_at(&self, params: &PolicyParams) -> f64 {
        let (t, _) = evaluate_objective(
            params,
            &self.reference,
            &self.ds,
            &self.groups,
            &self.signals,
            &self.cfg,
            false,
            ExecMode::Sequential,
        )
        .unwrap();
        t.value
    }

    pub fn gradient(&self, mode: ExecMode) -> Vec<f64> {
        evaluate_objective(
            &self.params,
            &self.reference,
            &self.ds,
            &self.groups,
            &self.signals,
            &self.cfg,
            true,
            mode,
        )
        .unwrap()
        .1
        .unwrap()
    }

    /// Smallest distance from any masked token's ratio to a clip boundary.
    pub fn boundary_margin(&self) -> f64 {
        let (lo, hi) = (1.0 - self.cfg.clip_eps, 1.0 + self.cfg.clip_eps);
        let mut m = f64::INFINITY;
        for g in &self.groups {
            let q = self.ds.query(g.query_id).unwrap();
            for r in g.masked() {
                let lp = rftlab_core::policy::sequence_logprobs(
                    &self.params,
                    &self.ds.feature_map,
                    q,
                    &r.tokens,
                    self.cfg.temperature,
                );
                for (a, b) in lp.iter().zip(&r.old_logprobs) {
                    let ratio = (a - b).exp();
                    m = m.min((ratio - lo).abs()).min((ratio - hi).abs());
                }
            }
        }
        m
    }

    /// Central differences of the objective with step `h`.
    pub fn finite_difference(&self, h: f64) -> Vec<f64> {
        let base = self.params.weights().to_vec();
        (0..base.len())
            .map(|i| {
                let at = |delta: f64| {
                    let mut w = base.clone();
                    w[i] += delta;
                    let p = PolicyParams::from_weights(
                        self.params.feature_dim(),
                        self.params.vocab_size(),
                        w,
                    )
                    .unwrap();
                    self.value_at(&p)
                };
                (at(h) - at(-h)) / (2.0 * h)
            })
            .collect()
    }
}

pub struct InstanceSpec {
    pub beta: f64,
    pub mode: AdvantageMode,
    pub masked: bool,
    pub length_normalize: bool,
}

/// A random instance with vocabulary ≤ 5, responses ≤ 4 tokens and at most 60
/// parameters. Rollouts are drawn from a behavior policy near `params`, so
/// ratios straddle the clip band.
pub fn random_instance(seed: u64, spec: &InstanceSpec) -> Instance {
    let mut rng = rng(seed);
    let (k, len, d) = loop {
        let k = rng.random_range(2..=5usize);
        let len = rng.random_range(1..=4usize);
        let d = rng.random_range(0..=3usize);
        if (len * (d + 1) + k) * k <= 60 {
            break (k, len, d);
        }
    };
    let map = FeatureMap::new(FeatureKind::Linear, d, len, k, 0).unwrap();
    let n_queries = rng.random_range(1..=3u64);
    let queries: Vec<Query> = (0..n_queries)
        .map(|id| Query {
            id,
            features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            answer: TokenSequence::new((0..len).map(|_| rng.random_range(0..k) as Token).collect()),
        })
        .collect();
    let ds = dataset(map, queries);
    let map = &ds.feature_map;
    let params = random_params(map, &mut rng, 1.0);
    let old = perturbed(&params, &mut rng, 0.4);
    let reference = random_params(map, &mut rng, 0.5);
    let cfg = TrainConfig {
        advantage_mode: spec.mode,
        kl_coeff: spec.beta,
        length_normalize: spec.length_normalize,
        ..TrainConfig::default()
    };
    let sp = SamplingParams::standard(len);

    let mut groups = Vec::new();
    let mut signals = Vec::new();
    for q in &ds.train {
        let g = rng.random_range(1..=4usize);
        let rollouts: Vec<Rollout> = (0..g)
            .map(|_| {
                let s = sample_response(&old, map, q, &sp, &mut rng);
                Rollout {
                    query_id: q.id,
                    tokens: s.tokens,
                    old_logprobs: s.logprobs,
                    reward: u8::from(rng.random_bool(0.5)),
                    round: 0,
                }
            })
            .collect();
        let mut mask = vec![true; g];
        if spec.masked {
            for m in mask.iter_mut().skip(1) {
                *m = rng.random_bool(0.5);
            }
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| f64::from(r.reward)).collect();
        let sig = match spec.mode {
            AdvantageMode::RawReward => rollouts.iter().map(|r| signal_raw(r.reward)).collect(),
            AdvantageMode::Grpo => grpo_advantage(&rewards, cfg.std_eps),
        };
        signals.extend(sig.iter().zip(&mask).filter(|(_, &m)| m).map(|(s, _)| *s));
        groups.push(RolloutGroup::new(q.id, rollouts, mask).unwrap());
    }
    Instance {
        ds,
        params,
        reference,
        groups,
        signals,
        cfg,
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Direct mean / population-std normalization.
pub fn grpo_oracle(r: &[f64], eps: f64) -> Vec<f64> {
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let std = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    r.iter().map(|x| (x - mean) / (std + eps)).collect()
}
