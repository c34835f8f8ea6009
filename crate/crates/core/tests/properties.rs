mod common;

use proptest::prelude::*;
use rand::Rng;
use rftlab_core::environment::{generate_task, verify, FeatureKind, FeatureMap, Query, TaskFamily, TaskSpec};
use rftlab_core::exec::ExecMode;
use rftlab_core::learner::{
    batch_indices, evaluate_objective, grpo_advantage, train_round, AdvantageMode, MaskMode,
    Rollout, RolloutGroup, RunState, TrainConfig,
};
use rftlab_core::pipeline::budget_pairs;
use rftlab_core::pipeline::eval::{evaluate_pass1, EvalKey};
use rftlab_core::policy::{
    kl_to_reference, next_token_probs, sample_response, sequence_logprobs, PolicyParams,
    SamplingParams, Token, TokenSequence,
};
use rftlab_core::replay::{advantage_with_replay, ReplayBuffer};
use rftlab_core::rng::{stream, Purpose};

use common::*;

/// Rewards on a 1/8 grid, the kind of values outcome rewards and their means take.
fn rewards(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u8..=8).prop_map(|x| f64::from(x) / 8.0), 1..=max_len)
}

fn pop_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

fn small_map() -> impl Strategy<Value = (FeatureMap, u64)> {
    (2usize..=6, 1usize..=4, 0usize..=4, any::<u64>()).prop_map(|(k, l, d, seed)| {
        (FeatureMap::new(FeatureKind::Linear, d, l, k, 0).unwrap(), seed)
    })
}

fn query_for(map: &FeatureMap, rng: &mut impl rand::Rng) -> Query {
    let d = match *map {
        FeatureMap::Linear { query_dim, .. } => query_dim,
        FeatureMap::Tabular { .. } => 0,
    };
    Query {
        id: 0,
        features: (0..d).map(|_| rng.random_range(-2.0..2.0)).collect(),
        answer: TokenSequence::new(vec![0; map.response_len()]),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn grpo_is_centered_and_scaled(r in rewards(64), eps in prop_oneof![Just(1e-8), Just(1e-4), Just(0.1)]) {
        let a = grpo_advantage(&r, eps);
        let (_, s) = pop_mean_std(&r);
        let (m, sa) = pop_mean_std(&a);
        prop_assert!(m.abs() < 1e-12, "mean {m}");
        if s > 0.0 {
            prop_assert!((sa - s / (s + eps)).abs() < 1e-12, "std {sa} vs {}", s / (s + eps));
        } else {
            prop_assert!(a.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn grpo_is_permutation_equivariant(r in rewards(64), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..r.len()).collect();
        idx.shuffle(&mut rng(seed));
        let permuted: Vec<f64> = idx.iter().map(|&i| r[i]).collect();
        let a = grpo_advantage(&r, 1e-8);
        let b = grpo_advantage(&permuted, 1e-8);
        for (j, &i) in idx.iter().enumerate() {
            prop_assert!((b[j] - a[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_groups_get_exactly_zero(v in -10.0f64..10.0, n in 1usize..64) {
        prop_assert!(grpo_advantage(&vec![v; n], 1e-8).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn replay_advantage_is_a_prefix_of_the_union(
        cur in rewards(16),
        rep in prop::collection::vec((0u8..=1).prop_map(f64::from), 0..=16),
    ) {
        let a = advantage_with_replay(&cur, &rep, 1e-8);
        let union: Vec<f64> = cur.iter().chain(&rep).copied().collect();
        let b = grpo_advantage(&union, 1e-8);
        prop_assert_eq!(a.len(), cur.len());
        for i in 0..cur.len() {
            prop_assert!((a[i] - b[i]).abs() <= 1e-15);
        }
    }

    #[test]
    fn replay_buffer_respects_capacity_and_recency(
        cap in 0usize..10,
        pushes in prop::collection::vec((0u64..3, prop::collection::vec(0u8..=1, 0..6)), 0..30),
        k in 0usize..12,
    ) {
        let mut buf = ReplayBuffer::new(cap);
        let mut history: Vec<Vec<(u8, u64)>> = vec![vec![]; 3];
        for (round, (q, rw)) in pushes.iter().enumerate() {
            buf.push(*q, rw, round as u64);
            history[*q as usize].extend(rw.iter().map(|&x| (x, round as u64)));
        }
        for q in 0..3u64 {
            let h = &history[q as usize];
            prop_assert!(buf.len(q) <= cap);
            prop_assert_eq!(buf.len(q), h.len().min(cap));
            let take = k.min(buf.len(q));
            let expect: Vec<(u8, u64)> = h[h.len() - take..].to_vec();
            let got: Vec<(u8, u64)> = buf.recent(q, k).map(|e| (e.reward, e.round)).collect();
            prop_assert_eq!(got, expect);
        }
    }

    #[test]
    fn probabilities_are_a_distribution((map, seed) in small_map(), temp in 0.3f64..3.0) {
        let mut r = rng(seed);
        let p = random_params(&map, &mut r, 3.0);
        let q = query_for(&map, &mut r);
        let prefix: Vec<Token> = (0..r.random_range(0..map.response_len()))
            .map(|_| r.random_range(0..map.vocab_size()) as Token)
            .collect();
        let probs = next_token_probs(&p, &map, &q, &TokenSequence::new(prefix), temp).unwrap();
        prop_assert!(probs.iter().all(|&x| x >= 0.0));
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic_and_logprobs_valid((map, seed) in small_map(), top_p in 0.3f64..=1.0) {
        let mut r = rng(seed);
        let p = random_params(&map, &mut r, 3.0);
        let q = query_for(&map, &mut r);
        let sp = SamplingParams::new(1.0, top_p, map.response_len()).unwrap();
        let a = sample_response(&p, &map, &q, &sp, &mut stream(seed, Purpose::Rollout, 1, 2, 3));
        let b = sample_response(&p, &map, &q, &sp, &mut stream(seed, Purpose::Rollout, 1, 2, 3));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.logprobs.iter().all(|lp| lp.exp() > 0.0 && lp.exp() <= 1.0));
        prop_assert_eq!(sequence_logprobs(&p, &map, &q, &a.tokens, 1.0), a.logprobs);
    }

    #[test]
    fn self_kl_is_exactly_zero((map, seed) in small_map()) {
        let mut r = rng(seed);
        let p = random_params(&map, &mut r, 3.0);
        let q = query_for(&map, &mut r);
        let seq = TokenSequence::new((0..map.response_len()).map(|_| r.random_range(0..map.vocab_size()) as Token).collect());
        prop_assert_eq!(kl_to_reference(&p, &p, &map, &q, &seq, 1.0), 0.0);
        let other = random_params(&map, &mut r, 3.0);
        prop_assert!(kl_to_reference(&p, &other, &map, &q, &seq, 1.0) >= 0.0);
    }

    #[test]
    fn params_bytes_round_trip((map, seed) in small_map()) {
        let p = random_params(&map, &mut rng(seed), 5.0);
        prop_assert_eq!(PolicyParams::from_bytes(&p.to_bytes()).unwrap(), p);
    }

    #[test]
    fn budget_pairs_are_the_divisors(budget in 1usize..2000) {
        let pairs = budget_pairs(budget);
        prop_assert!(pairs.iter().all(|&(b, g)| b * g == budget));
        prop_assert!(pairs.windows(2).all(|w| w[0].0 < w[1].0));
        prop_assert_eq!(pairs.len(), (1..=budget).filter(|b| budget % b == 0).count());
    }

    #[test]
    fn epochs_partition_the_train_split(seed in any::<u64>(), n in 1usize..200, b in 1usize..64) {
        prop_assume!(b <= n);
        let per_epoch = (n / b) as u64;
        let mut seen = vec![false; n];
        for round in 0..per_epoch {
            for i in batch_indices(seed, round, n, b) {
                prop_assert!(i < n);
                prop_assert!(!seen[i], "query {i} repeated within an epoch");
                seen[i] = true;
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// With θ = θ_old, every ratio is 1 and the objective is Σ ℓ·S − β·KL.
    #[test]
    fn identity_ratios_give_length_weighted_signals(seed in any::<u64>(), beta in prop_oneof![Just(0.0), Just(0.001), Just(0.5)]) {
        let inst = random_instance(seed, &InstanceSpec { beta, mode: AdvantageMode::Grpo, masked: true, length_normalize: false });
        let mut groups = inst.groups.clone();
        let mut expect = 0.0;
        let mut sig = inst.signals.iter();
        for g in &mut groups {
            let q = inst.ds.query(g.query_id).unwrap().clone();
            for (r, &m) in g.rollouts.iter_mut().zip(&g.gradient_mask) {
                r.old_logprobs = sequence_logprobs(&inst.params, &inst.ds.feature_map, &q, &r.tokens, 1.0);
                if m {
                    expect += r.tokens.len() as f64 * sig.next().unwrap();
                }
            }
        }
        let (t, _) = evaluate_objective(&inst.params, &inst.reference, &inst.ds, &groups, &inst.signals, &inst.cfg, false, ExecMode::Sequential).unwrap();
        prop_assert!((t.surrogate - expect).abs() < 1e-12, "{} vs {expect}", t.surrogate);
        prop_assert_eq!(t.clipped_tokens, 0);
        prop_assert!((t.value - (t.surrogate - beta * t.kl)).abs() < 1e-15);
    }

    /// Zero signals and β = 0: the gradient vanishes identically.
    #[test]
    fn zero_signals_give_zero_gradient(seed in any::<u64>()) {
        let mut inst = random_instance(seed, &InstanceSpec { beta: 0.0, mode: AdvantageMode::RawReward, masked: false, length_normalize: false });
        inst.signals.iter_mut().for_each(|s| *s = 0.0);
        prop_assert!(inst.gradient(ExecMode::Sequential).iter().all(|&g| g == 0.0));
    }

    /// The clipped surrogate never exceeds the unclipped one.
    #[test]
    fn clipping_is_pessimistic(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceSpec { beta: 0.0, mode: AdvantageMode::Grpo, masked: false, length_normalize: false });
        let loose = TrainConfig { clip_eps: 1e9, ..inst.cfg.clone() };
        let clipped = inst.value_at(&inst.params);
        let (t, _) = evaluate_objective(&inst.params, &inst.reference, &inst.ds, &inst.groups, &inst.signals, &loose, false, ExecMode::Sequential).unwrap();
        prop_assert!(clipped <= t.value + 1e-12);
    }

    #[test]
    fn parallel_and_sequential_gradients_are_identical(seed in any::<u64>()) {
        let inst = random_instance(seed, &InstanceSpec { beta: 0.001, mode: AdvantageMode::Grpo, masked: true, length_normalize: true });
        prop_assert_eq!(inst.gradient(ExecMode::Parallel), inst.gradient(ExecMode::Sequential));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_tasks_are_sound(seed in any::<u64>(), seq in any::<bool>(), structured in any::<bool>()) {
        let spec = TaskSpec {
            seed,
            structured,
            n_train: 40,
            n_test: 12,
            ..if seq { TaskSpec::sequence() } else { TaskSpec::default() }
        };
        let ds = generate_task(&spec).unwrap();
        prop_assert_eq!(generate_task(&spec).unwrap(), ds.clone());
        for q in ds.train.iter().chain(&ds.test) {
            prop_assert_eq!(verify(q, &q.answer), 1);
            prop_assert_eq!(q.answer.len(), ds.response_len);
        }
        let ids: std::collections::HashSet<u64> = ds.train.iter().map(|q| q.id).collect();
        prop_assert!(ds.test.iter().all(|q| !ids.contains(&q.id)));
        prop_assert_eq!(ds.family == TaskFamily::SequenceReasoning, seq);
    }

    /// Replay only widens normalization groups: gradient-bearing rollouts per
    /// round stay at B·c and the rollout counter grows by B·c.
    #[test]
    fn replay_never_adds_gradient_rollouts(seed in any::<u64>(), c in 1usize..=4) {
        let ds = generate_task(&TaskSpec { n_train: 64, n_test: 8, ..TaskSpec::default() }).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            rollouts_per_query: c,
            replay_rollouts: 8 - c,
            advantage_mode: AdvantageMode::Grpo,
            gradient_mask: MaskMode::All,
            ..TrainConfig::default()
        };
        let mut state = RunState::new(&ds, &cfg, seed);
        for t in 1..=6u64 {
            let stats = train_round(&mut state, &ds, &cfg, ExecMode::Parallel).unwrap();
            prop_assert_eq!(stats.gradient_rollouts, 16 * c);
            prop_assert_eq!(stats.rollouts_sampled, 16 * c);
            prop_assert_eq!(state.rollouts_consumed, t * 16 * c as u64);
            for q in 0..64 {
                prop_assert!(state.replay.len(q) <= 8 - c);
            }
        }
    }

    #[test]
    fn pass1_is_a_probability(seed in any::<u64>(), scale in 0.0f64..5.0) {
        let ds = generate_task(&TaskSpec { n_train: 16, n_test: 4, ..TaskSpec::sequence() }).unwrap();
        let p = random_params(&ds.feature_map, &mut rng(seed), scale);
        let key = EvalKey { seed, purpose: Purpose::EvalTrain, round: 0 };
        let v = evaluate_pass1(&p, &ds.feature_map, &ds.train, &SamplingParams::standard(3), 4, key, ExecMode::Parallel).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn group_validation() {
    let r = Rollout {
        query_id: 0,
        tokens: TokenSequence::new(vec![0]),
        old_logprobs: vec![0.0],
        reward: 0,
        round: 0,
    };
    assert!(RolloutGroup::new(0, vec![r.clone()], vec![false]).is_err());
    assert!(RolloutGroup::new(1, vec![r.clone()], vec![true]).is_err());
    assert!(RolloutGroup::new(0, vec![r], vec![true, true]).is_err());
}
