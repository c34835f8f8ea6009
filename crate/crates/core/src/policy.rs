//! Linear-softmax sequence policy.
//!
//! The next-token distribution for query `q` after prefix `o_<τ` is
//! `softmax(Wᵀ φ(q, o_<τ) / temperature)`, where `φ` is the task's sparse
//! [`FeatureMap`] and `W` is a `feature_dim × vocab_size` matrix stored row-major.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{FeatureMap, Query};
use crate::error::{Error, Result};

pub type Token = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<Token>);

impl TokenSequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<Token>> for TokenSequence {
    fn from(v: Vec<Token>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    feature_dim: usize,
    vocab_size: usize,
    weights: Vec<f64>,
}

const PARAMS_MAGIC: &[u8; 4] = b"RFTP";
pub const PARAMS_FORMAT_VERSION: u32 = 1;

impl PolicyParams {
    /// All-zero weights: the uniform policy.
    pub fn zeros(feature_dim: usize, vocab_size: usize) -> Self {
        Self {
            feature_dim,
            vocab_size,
            weights: vec![0.0; feature_dim * vocab_size],
        }
    }

    pub fn from_weights(feature_dim: usize, vocab_size: usize, weights: Vec<f64>) -> Result<Self> {
        if feature_dim == 0 || vocab_size < 2 {
            return Err(Error::config("policy needs feature_dim >= 1 and vocab_size >= 2"));
        }
        if weights.len() != feature_dim * vocab_size {
            return Err(Error::config(format!(
                "expected {} weights for a {feature_dim}x{vocab_size} policy, got {}",
                feature_dim * vocab_size,
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::config("policy weights must be finite"));
        }
        Ok(Self {
            feature_dim,
            vocab_size,
            weights,
        })
    }

    /// A zero policy shaped for `map`.
    pub fn for_map(map: &FeatureMap) -> Self {
        Self::zeros(map.dim(), map.vocab_size())
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn check_map(&self, map: &FeatureMap) -> Result<()> {
        if self.feature_dim != map.dim() || self.vocab_size != map.vocab_size() {
            return Err(Error::config(format!(
                "policy is {}x{}, feature map needs {}x{}",
                self.feature_dim,
                self.vocab_size,
                map.dim(),
                map.vocab_size()
            )));
        }
        Ok(())
    }

    /// Header (`RFTP`, format version, feature_dim, vocab_size) followed by the
    /// weights as little-endian f64, row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 8 * self.weights.len());
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&PARAMS_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.vocab_size as u64).to_le_bytes());
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(format!("policy parameters: {m}"));
        if bytes.len() < 24 || &bytes[..4] != PARAMS_MAGIC {
            return Err(err("bad header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != PARAMS_FORMAT_VERSION {
            return Err(err(&format!("unsupported format version {version}")));
        }
        let fd = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let vs = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let body = &bytes[24..];
        if fd.checked_mul(vs).and_then(|n| n.checked_mul(8)) != Some(body.len()) {
            return Err(err("length does not match header"));
        }
        let weights = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_weights(fd, vs, weights).map_err(|e| err(&e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    /// Optional end-of-sequence token. Without it responses have exactly `max_len` tokens.
    pub eos_token: Option<Token>,
}

impl SamplingParams {
    pub fn new(temperature: f64, top_p: f64, max_len: usize) -> Result<Self> {
        let sp = Self {
            temperature,
            top_p,
            max_len,
            eos_token: None,
        };
        sp.validate()?;
        Ok(sp)
    }

    /// Temperature 1, top-p 1: plain softmax sampling.
    pub fn standard(max_len: usize) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_len,
            eos_token: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("sampling.temperature must be positive"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::config("sampling.top_p must lie in (0, 1]"));
        }
        if self.max_len == 0 {
            return Err(Error::config("sampling.max_len must be positive"));
        }
        Ok(())
    }
}

/// `z_k = Σ_f φ_f W[f, k]` for sparse features `φ`.
pub(crate) fn logits_into(params: &PolicyParams, feats: &[(usize, f64)], out: &mut Vec<f64>) {
    let k = params.vocab_size;
    out.clear();
    out.resize(k, 0.0);
    for &(f, x) in feats {
        let row = &params.weights[f * k..(f + 1) * k];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += x * w;
        }
    }
}

/// Log-softmax of `logits / temperature` with max subtraction, in place.
pub(crate) fn log_softmax_in_place(values: &mut [f64], temperature: f64) {
    if temperature != 1.0 {
        values.iter_mut().for_each(|v| *v /= temperature);
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    values.iter_mut().for_each(|v| *v -= lse);
}

/// Reusable buffers for per-position evaluation.
#[derive(Debug, Default)]
pub(crate) struct Scratch {
    pub feats: Vec<(usize, f64)>,
    pub logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
}

impl Scratch {
    /// Fills `feats` and `logp` for the next token after `prefix`.
    pub fn eval(
        &mut self,
        params: &PolicyParams,
        map: &FeatureMap,
        query: &Query,
        prefix: &[Token],
        temperature: f64,
    ) {
        map.write(query, prefix, &mut self.feats);
        logits_into(params, &self.feats, &mut self.logp);
        log_softmax_in_place(&mut self.logp, temperature);
    }

    /// Fills `ref_logp` from the features already in `feats`.
    pub fn eval_reference(&mut self, reference: &PolicyParams, temperature: f64) {
        logits_into(reference, &self.feats, &mut self.ref_logp);
        log_softmax_in_place(&mut self.ref_logp, temperature);
    }
}

fn check_inputs(params: &PolicyParams, map: &FeatureMap, query: &Query) -> Result<()> {
    params.check_map(map)?;
    map.check_query(query)
}

/// Raw next-token logits (before temperature).
pub fn logits(
    params: &PolicyParams,
    map: &FeatureMap,
    query: &Query,
    prefix: &TokenSequence,
) -> Result<Vec<f64>> {
    check_inputs(params, map, query)?;
    if prefix.len() >= map.response_len() {
        return Err(Error::Contract(format!(
            "prefix of length {} leaves no room in responses of length {}",
            prefix.len(),
            map.response_len()
        )));
    }
    if prefix.tokens().iter().any(|&t| t as usize >= params.vocab_size) {
        return Err(Error::Contract("prefix token outside vocabulary".into()));
    }
    let mut feats = Vec::new();
    map.write(query, prefix.tokens(), &mut feats);
    let mut out = Vec::new();
    logits_into(params, &feats, &mut out);
    Ok(out)
}

/// Next-token probabilities `softmax(logits / temperature)`.
pub fn next_token_probs(
    params: &PolicyParams,
    map: &FeatureMap,
    query: &Query,
    prefix: &TokenSequence,
    temperature: f64,
) -> Result<Vec<f64>> {
    let mut z = logits(params, map, query, prefix)?;
    log_softmax_in_place(&mut z, temperature);
    Ok(z.into_iter().map(f64::exp).collect())
}

/// A sampled response with the log-probabilities recorded at generation time.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: TokenSequence,
    pub logprobs: Vec<f64>,
}

/// Draws one token from `logp` (full-vocabulary log-probabilities), restricted
/// to the top-p nucleus. The most likely token is always in the nucleus.
pub(crate) fn draw_token<R: Rng + ?Sized>(logp: &[f64], top_p: f64, rng: &mut R) -> Token {
    let u: f64 = rng.random();
    if top_p >= 1.0 {
        let mut acc = 0.0;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                return i as Token;
            }
        }
        // Rounding left u above the final cumulative sum.
        return logp
            .iter()
            .rposition(|lp| lp.exp() > 0.0)
            .unwrap_or(logp.len() - 1) as Token;
    }
    let mut order: Vec<usize> = (0..logp.len()).collect();
    order.sort_by(|&a, &b| logp[b].total_cmp(&logp[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut kept = 0;
    for &i in &order {
        mass += logp[i].exp();
        kept += 1;
        if mass >= top_p {
            break;
        }
    }
    let target = u * mass;
    let mut acc = 0.0;
    for &i in &order[..kept] {
        acc += logp[i].exp();
        if target < acc {
            return i as Token;
        }
    }
    order[kept - 1] as Token
}

pub(crate) fn sample_with_scratch<R: Rng + ?Sized>(
    params: &PolicyParams,
    map: &FeatureMap,
    query: &Query,
    sp: &SamplingParams,
    rng: &mut R,
    scratch: &mut Scratch,
) -> SampledResponse {
    let max_len = sp.max_len.min(map.response_len());
    let mut tokens = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        scratch.eval(params, map, query, &tokens, sp.temperature);
        let t = draw_token(&scratch.logp, sp.top_p, rng);
        logprobs.push(scratch.logp[t as usize]);
        tokens.push(t);
        if sp.eos_token == Some(t) {
            break;
        }
    }
    SampledResponse {
        tokens: TokenSequence::new(tokens),
        logprobs,
    }
}

/// Samples a response autoregressively.
///
/// Responses stop at `sp.max_len` (capped by the feature map's response length)
/// or right after the EOS token when one is configured. The returned
/// log-probabilities are taken from the tempered, untruncated softmax so that
/// [`sequence_logprobs`] reproduces them exactly.
pub fn sample_response<R: Rng + ?Sized>(
    params: &PolicyParams,
    map: &FeatureMap,
    query: &Query,
    sp: &SamplingParams,
    rng: &mut R,
) -> SampledResponse {
    sample_with_scratch(params, map, query, sp, rng, &mut Scratch::default())
}

/// `log π(o_τ | q, o_<τ)` for every position of `seq`.
pub fn sequence_logprobs(
    params: &PolicyParams,
    map: &FeatureMap,
    query: &Query,
    seq: &TokenSequence,
    temperature: f64,
) -> Vec<f64> {
    let mut scratch = Scratch::default();
    let toks = seq.tokens();
    (0..toks.len())
        .map(|tau| {
            scratch.eval(params, map, query, &toks[..tau], temperature);
            scratch.logp[toks[tau] as usize]
        })
        .collect()
}

/// `Σ_τ KL(π_params(·|q, o_<τ) ‖ π_ref(·|q, o_<τ))`, each term summed exactly over the vocabulary.
pub fn kl_to_reference(
    params: &PolicyParams,
    reference: &PolicyParams,
    map: &FeatureMap,
    query: &Query,
    seq: &TokenSequence,
    temperature: f64,
) -> f64 {
    let mut scratch = Scratch::default();
    let toks = seq.tokens();
    (0..toks.len())
        .map(|tau| {
            scratch.eval(params, map, query, &toks[..tau], temperature);
            scratch.eval_reference(reference, temperature);
            position_kl(&scratch.logp, &scratch.ref_logp)
        })
        .sum()
}

pub(crate) fn position_kl(logp: &[f64], ref_logp: &[f64]) -> f64 {
    let kl: f64 = logp
        .iter()
        .zip(ref_logp)
        .map(|(&lp, &lr)| lp.exp() * (lp - lr))
        .sum();
    kl.max(0.0)
}
