//! The clipped surrogate objective with KL penalty, and its analytic gradient.
//!
//! For gradient-bearing rollout `i` with signal `S_i` and token position `τ`,
//!
//! ```text
//! J = Σ_i Σ_τ min(r_iτ S_i, clip(r_iτ, 1 − ε, 1 + ε) S_i) − β Σ_i KL_i
//! r_iτ = π_θ(o_τ | q, o_<τ) / π_old(o_τ | q, o_<τ)
//! ```
//!
//! where `KL_i` is the exact per-position KL to the reference policy summed
//! along rollout `i`.

use crate::environment::Dataset;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::policy::{position_kl, PolicyParams, Scratch};

use super::{RolloutGroup, TrainConfig};

/// Ratios closer than this to a clip boundary count as clipped.
pub const CLIP_BOUNDARY_TOL: f64 = 1e-12;

/// Work is split into at most this many contiguous slices of groups. The split
/// depends only on the number of groups, so the summation order (and every
/// bit of the result) is the same for any thread count.
const MAX_SLICES: usize = 16;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveTerms {
    /// `surrogate − β · kl`.
    pub value: f64,
    pub surrogate: f64,
    /// Summed KL over gradient-bearing rollouts.
    pub kl: f64,
    /// Token positions where the clipped branch was selected.
    pub clipped_tokens: usize,
    pub tokens: usize,
    pub rollouts: usize,
}

impl ObjectiveTerms {
    fn add(&mut self, o: &ObjectiveTerms) {
        self.surrogate += o.surrogate;
        self.kl += o.kl;
        self.clipped_tokens += o.clipped_tokens;
        self.tokens += o.tokens;
        self.rollouts += o.rollouts;
    }
}

fn check_inputs(
    params: &PolicyParams,
    reference: &PolicyParams,
    ds: &Dataset,
    groups: &[RolloutGroup],
    signals: &[f64],
) -> Result<()> {
    params.check_map(&ds.feature_map)?;
    reference.check_map(&ds.feature_map)?;
    let masked: usize = groups.iter().map(RolloutGroup::n_masked).sum();
    if masked != signals.len() {
        return Err(Error::Contract(format!(
            "{} signals for {masked} gradient-bearing rollouts",
            signals.len()
        )));
    }
    for g in groups {
        let q = ds
            .query(g.query_id)
            .ok_or_else(|| Error::Contract(format!("unknown query {}", g.query_id)))?;
        ds.feature_map.check_query(q)?;
        for r in g.masked() {
            if r.old_logprobs.len() != r.tokens.len() || r.tokens.is_empty() {
                return Err(Error::Contract(format!(
                    "rollout for query {} is missing behavior log-probabilities",
                    r.query_id
                )));
            }
            if r.tokens().iter().any(|&t| t as usize >= params.vocab_size()) {
                return Err(Error::Contract("rollout token outside vocabulary".into()));
            }
            if r.tokens.len() > ds.feature_map.response_len() {
                return Err(Error::Contract("rollout longer than the task's responses".into()));
            }
        }
    }
    Ok(())
}

/// Evaluates one slice of groups; adds the gradient into `grad` when present.
fn eval_slice(
    params: &PolicyParams,
    reference: &PolicyParams,
    ds: &Dataset,
    groups: &[RolloutGroup],
    signals: &[f64],
    cfg: &TrainConfig,
    mut grad: Option<&mut [f64]>,
) -> ObjectiveTerms {
    let map = &ds.feature_map;
    let k = params.vocab_size();
    let temp = cfg.temperature;
    let (lo, hi) = (1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let beta = cfg.kl_coeff;
    let mut scratch = Scratch::default();
    let mut dz = vec![0.0; k];
    let mut terms = ObjectiveTerms::default();
    let mut sig = signals.iter();

    for g in groups {
        let query = ds.query(g.query_id).expect("checked");
        for r in g.masked() {
            let s = *sig.next().expect("checked");
            let toks = r.tokens();
            let w = if cfg.length_normalize {
                1.0 / toks.len() as f64
            } else {
                1.0
            };
            terms.rollouts += 1;
            for (tau, &tok) in toks.iter().enumerate() {
                let tok = tok as usize;
                scratch.eval(params, map, query, &toks[..tau], temp);
                scratch.eval_reference(reference, temp);

                let ratio = (scratch.logp[tok] - r.old_logprobs[tau]).exp();
                let unclipped = ratio * s;
                let clipped = ratio.clamp(lo, hi) * s;
                terms.surrogate += w * unclipped.min(clipped);
                let at_boundary = (ratio - lo).abs() < CLIP_BOUNDARY_TOL
                    || (ratio - hi).abs() < CLIP_BOUNDARY_TOL;
                let flows = !at_boundary && ((lo..=hi).contains(&ratio) || unclipped < clipped);
                terms.tokens += 1;
                if !flows && s != 0.0 {
                    terms.clipped_tokens += 1;
                }

                let raw_kl: f64 = scratch
                    .logp
                    .iter()
                    .zip(&scratch.ref_logp)
                    .map(|(&lp, &lr)| lp.exp() * (lp - lr))
                    .sum();
                terms.kl += position_kl(&scratch.logp, &scratch.ref_logp);

                let Some(grad) = grad.as_deref_mut() else {
                    continue;
                };
                // d/dz_j of log p_tok is (1[j = tok] − p_j) / T; of KL it is
                // p_j (log p_j − log r_j − KL) / T.
                let coef = if flows { w * s * ratio } else { 0.0 };
                if coef == 0.0 && beta == 0.0 {
                    continue;
                }
                for (j, d) in dz.iter_mut().enumerate() {
                    let lp = scratch.logp[j];
                    let p = lp.exp();
                    let ind = if j == tok { 1.0 } else { 0.0 };
                    *d = (coef * (ind - p) - beta * p * (lp - scratch.ref_logp[j] - raw_kl)) / temp;
                }
                for &(f, x) in &scratch.feats {
                    let row = &mut grad[f * k..(f + 1) * k];
                    for (gv, &d) in row.iter_mut().zip(&dz) {
                        *gv += x * d;
                    }
                }
            }
        }
    }
    terms
}

/// Objective value and, when `want_grad`, its gradient with respect to `params`.
///
/// Ratio denominators come from each rollout's recorded `old_logprobs`.
/// `signals` holds one entry per gradient-bearing rollout, in group order.
/// Where the minimum selects the clipped branch the ratio term is treated as
/// constant in the parameters.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    ds: &Dataset,
    groups: &[RolloutGroup],
    signals: &[f64],
    cfg: &TrainConfig,
    want_grad: bool,
    mode: ExecMode,
) -> Result<(ObjectiveTerms, Option<Vec<f64>>)> {
    check_inputs(params, reference, ds, groups, signals)?;
    let n_slices = groups.len().clamp(1, MAX_SLICES);
    let per = groups.len().div_ceil(n_slices).max(1);
    // Signal offsets of each slice.
    let mut offsets = vec![0usize];
    for chunk in groups.chunks(per) {
        let last = *offsets.last().unwrap();
        offsets.push(last + chunk.iter().map(RolloutGroup::n_masked).sum::<usize>());
    }
    let slices: Vec<&[RolloutGroup]> = groups.chunks(per).collect();
    let parts = exec::map_indexed(mode, slices.len(), |i| {
        let sigs = &signals[offsets[i]..offsets[i + 1]];
        let mut g = want_grad.then(|| vec![0.0; params.len()]);
        let t = eval_slice(params, reference, ds, slices[i], sigs, cfg, g.as_deref_mut());
        (t, g)
    });

    let mut terms = ObjectiveTerms::default();
    let mut grad = want_grad.then(|| vec![0.0; params.len()]);
    for (t, g) in &parts {
        terms.add(t);
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    terms.value = terms.surrogate - cfg.kl_coeff * terms.kl;
    Ok((terms, grad))
}

/// The scalar surrogate objective.
pub fn surrogate_objective(
    params: &PolicyParams,
    reference: &PolicyParams,
    ds: &Dataset,
    groups: &[RolloutGroup],
    signals: &[f64],
    cfg: &TrainConfig,
) -> Result<f64> {
    evaluate_objective(params, reference, ds, groups, signals, cfg, false, ExecMode::Sequential)
        .map(|(t, _)| t.value)
}

/// Analytic gradient of [`surrogate_objective`] with respect to `params`,
/// flattened in the parameters' row-major layout.
pub fn objective_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    ds: &Dataset,
    groups: &[RolloutGroup],
    signals: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    evaluate_objective(params, reference, ds, groups, signals, cfg, true, ExecMode::Sequential)
        .map(|(_, g)| g.expect("gradient requested"))
}
