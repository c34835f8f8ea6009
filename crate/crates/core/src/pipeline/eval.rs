use crate::environment::{verify, FeatureMap, Query};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::policy::{sample_with_scratch, PolicyParams, SamplingParams, Scratch};
use crate::rng::{self, Purpose};

/// Identifies the random streams of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalKey {
    pub seed: u64,
    pub purpose: Purpose,
    pub round: u64,
}

/// Fraction of `(query, replicate)` pairs whose first sampled response is
/// correct, sampling with the training-time parameters `sp`.
///
/// Deterministic in `key`; evaluation streams never overlap training streams.
pub fn evaluate_pass1(
    params: &PolicyParams,
    map: &FeatureMap,
    queries: &[Query],
    sp: &SamplingParams,
    samples_per_query: usize,
    key: EvalKey,
    mode: ExecMode,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::config("Pass@1 over an empty query set is undefined"));
    }
    if samples_per_query == 0 {
        return Err(Error::config("eval_samples_per_query must be positive"));
    }
    params.check_map(map)?;
    for q in queries {
        map.check_query(q)?;
    }
    let hits = exec::map_indexed(mode, queries.len(), |i| {
        let q = &queries[i];
        let mut scratch = Scratch::default();
        (0..samples_per_query)
            .map(|rep| {
                let mut rng = rng::stream(key.seed, key.purpose, key.round, i as u64, rep as u64);
                let r = sample_with_scratch(params, map, q, sp, &mut rng, &mut scratch);
                u64::from(verify(q, &r.tokens))
            })
            .sum::<u64>()
    });
    let total: u64 = hits.iter().sum();
    Ok(total as f64 / (queries.len() * samples_per_query) as f64)
}
