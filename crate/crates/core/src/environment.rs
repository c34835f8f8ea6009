//! Synthetic verifiable-reward tasks.
//!
//! Every query belongs to a latent cluster. Its feature vector is the cluster
//! centroid plus isotropic Gaussian noise. In the structured mode the correct
//! answer is a function of the cluster, so a linear policy trained on the train
//! split can solve held-out test queries from the same clusters. In the
//! unstructured mode every query gets an independent random answer and nothing
//! learned on the train split transfers.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Token, TokenSequence};
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    /// One token per response: every query is a context and every token an arm.
    ContextualBandit,
    /// Fixed-length multi-token responses.
    SequenceReasoning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureKind {
    /// Query features placed in a per-position block, plus a previous-token one-hot.
    Linear,
    /// One indicator per (query, prefix) pair.
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub n_train: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub response_len: usize,
    /// Length of each query's feature vector.
    pub query_dim: usize,
    pub n_clusters: usize,
    pub noise_scale: f64,
    pub centroid_scale: f64,
    /// When false, answers are drawn independently of the features.
    pub structured: bool,
    pub feature_map: FeatureKind,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            family: TaskFamily::ContextualBandit,
            n_train: 256,
            n_test: 64,
            vocab_size: 16,
            response_len: 1,
            query_dim: 16,
            n_clusters: 8,
            noise_scale: 0.5,
            centroid_scale: 1.0,
            structured: true,
            feature_map: FeatureKind::Linear,
            seed: 7,
        }
    }
}

impl TaskSpec {
    /// The structured sequence task (K = 8, L = 3).
    pub fn sequence() -> Self {
        Self {
            family: TaskFamily::SequenceReasoning,
            vocab_size: 8,
            response_len: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("task.n_train and task.n_test must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("task.vocab_size must be at least 2"));
        }
        match self.family {
            TaskFamily::ContextualBandit if self.response_len != 1 => {
                return Err(Error::config(
                    "task.response_len must be 1 for the contextual-bandit family",
                ))
            }
            TaskFamily::SequenceReasoning if self.response_len < 2 => {
                return Err(Error::config(
                    "task.response_len must be at least 2 for the sequence-reasoning family",
                ))
            }
            _ => {}
        }
        if self.query_dim == 0 || self.n_clusters == 0 {
            return Err(Error::config("task.query_dim and task.n_clusters must be positive"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config("task.noise_scale must be finite and non-negative"));
        }
        if !(self.centroid_scale >= 0.0 && self.centroid_scale.is_finite()) {
            return Err(Error::config("task.centroid_scale must be finite and non-negative"));
        }
        // Without noise every query of a cluster has the same features, so there
        // are only n_clusters distinct contexts.
        let total = self.n_train + self.n_test;
        if self.noise_scale == 0.0 && total > self.n_clusters {
            return Err(Error::config(format!(
                "task requests {total} queries but only {} distinct contexts exist without noise",
                self.n_clusters
            )));
        }
        FeatureMap::new(self.feature_map, self.query_dim, self.response_len, self.vocab_size, total)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: u64,
    pub features: Vec<f64>,
    /// The unique correct response.
    pub answer: TokenSequence,
}

/// Maps a (query, prefix) pair to sparse policy features.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    Linear {
        query_dim: usize,
        response_len: usize,
        vocab_size: usize,
    },
    Tabular {
        n_queries: usize,
        response_len: usize,
        vocab_size: usize,
        prefix_states: usize,
    },
}

const MAX_FEATURE_DIM: usize = 1 << 24;

impl FeatureMap {
    pub fn new(
        kind: FeatureKind,
        query_dim: usize,
        response_len: usize,
        vocab_size: usize,
        n_queries: usize,
    ) -> Result<Self> {
        let map = match kind {
            FeatureKind::Linear => FeatureMap::Linear {
                query_dim,
                response_len,
                vocab_size,
            },
            FeatureKind::Tabular => {
                // Number of prefixes of length 0..L: 1 + K + ... + K^(L-1).
                let mut states: usize = 0;
                let mut pow: usize = 1;
                for _ in 0..response_len {
                    states = states
                        .checked_add(pow)
                        .ok_or_else(|| Error::config("tabular feature map too large"))?;
                    pow = pow.saturating_mul(vocab_size);
                }
                FeatureMap::Tabular {
                    n_queries,
                    response_len,
                    vocab_size,
                    prefix_states: states,
                }
            }
        };
        let params = map.dim().checked_mul(vocab_size);
        if map.dim() > MAX_FEATURE_DIM || params.is_none_or(|p| p > MAX_FEATURE_DIM * 4) {
            return Err(Error::config(format!(
                "feature map of dimension {} is too large",
                map.dim()
            )));
        }
        Ok(map)
    }

    pub fn dim(&self) -> usize {
        match *self {
            FeatureMap::Linear {
                query_dim,
                response_len,
                vocab_size,
            } => response_len * (query_dim + 1) + vocab_size,
            FeatureMap::Tabular {
                n_queries,
                prefix_states,
                ..
            } => n_queries.saturating_mul(prefix_states),
        }
    }

    pub fn vocab_size(&self) -> usize {
        match *self {
            FeatureMap::Linear { vocab_size, .. } | FeatureMap::Tabular { vocab_size, .. } => {
                vocab_size
            }
        }
    }

    pub fn response_len(&self) -> usize {
        match *self {
            FeatureMap::Linear { response_len, .. } | FeatureMap::Tabular { response_len, .. } => {
                response_len
            }
        }
    }

    /// Checks that `query` can be featurized by this map.
    pub fn check_query(&self, query: &Query) -> Result<()> {
        match *self {
            FeatureMap::Linear { query_dim, .. } if query.features.len() != query_dim => {
                Err(Error::config(format!(
                    "query {} has {} features, feature map expects {query_dim}",
                    query.id,
                    query.features.len()
                )))
            }
            FeatureMap::Tabular { n_queries, .. } if query.id as usize >= n_queries => Err(
                Error::config(format!("query id {} outside tabular map of {n_queries}", query.id)),
            ),
            _ => Ok(()),
        }
    }

    /// Writes the sparse features of `(query, prefix)` into `out` (cleared first).
    ///
    /// The prefix must be shorter than the response length.
    pub fn write(&self, query: &Query, prefix: &[Token], out: &mut Vec<(usize, f64)>) {
        out.clear();
        let pos = prefix.len();
        match *self {
            FeatureMap::Linear {
                query_dim,
                response_len,
                ..
            } => {
                debug_assert!(pos < response_len);
                let base = pos * (query_dim + 1);
                out.extend(query.features.iter().enumerate().map(|(j, &x)| (base + j, x)));
                out.push((base + query_dim, 1.0));
                if let Some(&prev) = prefix.last() {
                    out.push((response_len * (query_dim + 1) + prev as usize, 1.0));
                }
            }
            FeatureMap::Tabular {
                vocab_size,
                prefix_states,
                ..
            } => {
                let mut offset = 0usize;
                let mut pow = 1usize;
                for _ in 0..pos {
                    offset += pow;
                    pow *= vocab_size;
                }
                let code = prefix
                    .iter()
                    .fold(0usize, |acc, &t| acc * vocab_size + t as usize);
                out.push((query.id as usize * prefix_states + offset + code, 1.0));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub family: TaskFamily,
    pub train: Vec<Query>,
    pub test: Vec<Query>,
    pub vocab_size: usize,
    pub response_len: usize,
    pub query_dim: usize,
    pub feature_map: FeatureMap,
}

impl Dataset {
    /// Looks up a query by id. Train ids are `0..n_train`, test ids follow.
    pub fn query(&self, id: u64) -> Option<&Query> {
        let idx = id as usize;
        if idx < self.train.len() {
            Some(&self.train[idx])
        } else {
            self.test.get(idx - self.train.len())
        }
    }

    pub fn n_queries(&self) -> usize {
        self.train.len() + self.test.len()
    }
}

fn random_answer<R: Rng>(rng: &mut R, vocab: usize, len: usize) -> TokenSequence {
    TokenSequence::new((0..len).map(|_| rng.random_range(0..vocab) as Token).collect())
}

/// Builds the dataset described by `spec`. Deterministic in `spec.seed`.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, Purpose::Task, 0, 0, 0);
    let d = spec.query_dim;
    let k = spec.vocab_size;
    let len = spec.response_len;

    let centroids: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| {
            (0..d)
                .map(|_| spec.centroid_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    // Distinct answers per cluster whenever the response space is big enough.
    let space = (k as f64).powi(len as i32);
    let mut cluster_answers: Vec<TokenSequence> = Vec::with_capacity(spec.n_clusters);
    while cluster_answers.len() < spec.n_clusters {
        let a = random_answer(&mut rng, k, len);
        if (cluster_answers.len() as f64) < space && cluster_answers.contains(&a) {
            continue;
        }
        cluster_answers.push(a);
    }

    let total = spec.n_train + spec.n_test;
    // Balanced cluster assignment, shuffled so splits see every cluster.
    let mut clusters: Vec<usize> = (0..total).map(|i| i % spec.n_clusters).collect();
    clusters[..spec.n_train].shuffle(&mut rng);
    clusters[spec.n_train..].shuffle(&mut rng);

    let mut queries = Vec::with_capacity(total);
    for (i, &c) in clusters.iter().enumerate() {
        let features = centroids[c]
            .iter()
            .map(|&m| m + spec.noise_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let answer = if spec.structured {
            cluster_answers[c].clone()
        } else {
            random_answer(&mut rng, k, len)
        };
        queries.push(Query {
            id: i as u64,
            features,
            answer,
        });
    }
    let test = queries.split_off(spec.n_train);
    Ok(Dataset {
        family: spec.family,
        train: queries,
        test,
        vocab_size: k,
        response_len: len,
        query_dim: d,
        feature_map: FeatureMap::new(spec.feature_map, d, len, k, total)?,
    })
}

/// Outcome-level reward: 1 iff the response equals the answer exactly.
pub fn verify(query: &Query, response: &TokenSequence) -> u8 {
    u8::from(*response == query.answer)
}

const DATASET_MAGIC: &str = "rftlab-dataset 1";

fn family_name(f: TaskFamily) -> &'static str {
    match f {
        TaskFamily::ContextualBandit => "contextual-bandit",
        TaskFamily::SequenceReasoning => "sequence-reasoning",
    }
}

/// Serializes a dataset as line-delimited text: a two-line header, then one
/// query per line as `id<TAB>split<TAB>features<TAB>answer`.
pub fn export_dataset(ds: &Dataset) -> String {
    let kind = match ds.feature_map {
        FeatureMap::Linear { .. } => "linear",
        FeatureMap::Tabular { .. } => "tabular",
    };
    let mut out = String::new();
    let _ = writeln!(out, "{DATASET_MAGIC}");
    let _ = writeln!(
        out,
        "family={} vocab_size={} response_len={} query_dim={} feature_map={} n_train={} n_test={}",
        family_name(ds.family),
        ds.vocab_size,
        ds.response_len,
        ds.query_dim,
        kind,
        ds.train.len(),
        ds.test.len()
    );
    for (split, qs) in [("train", &ds.train), ("test", &ds.test)] {
        for q in qs {
            let feats: Vec<String> = q.features.iter().map(|x| format!("{x:?}")).collect();
            let ans: Vec<String> = q.answer.tokens().iter().map(|t| t.to_string()).collect();
            let _ = writeln!(out, "{}\t{}\t{}\t{}", q.id, split, feats.join(" "), ans.join(" "));
        }
    }
    out
}

/// Parses the format written by [`export_dataset`].
pub fn import_dataset(text: &str) -> Result<Dataset> {
    let bad = |line: usize, msg: &str| Error::config(format!("dataset line {line}: {msg}"));
    let mut lines = text.lines();
    if lines.next() != Some(DATASET_MAGIC) {
        return Err(bad(1, "missing or unsupported header"));
    }
    let header = lines.next().ok_or_else(|| bad(2, "missing metadata"))?;
    let mut meta = std::collections::BTreeMap::new();
    for kv in header.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| bad(2, "malformed metadata"))?;
        meta.insert(k, v);
    }
    let num = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(2, &format!("missing or invalid {key}")))
    };
    let family = match meta.get("family").copied() {
        Some("contextual-bandit") => TaskFamily::ContextualBandit,
        Some("sequence-reasoning") => TaskFamily::SequenceReasoning,
        _ => return Err(bad(2, "unknown family")),
    };
    let kind = match meta.get("feature_map").copied() {
        Some("linear") => FeatureKind::Linear,
        Some("tabular") => FeatureKind::Tabular,
        _ => return Err(bad(2, "unknown feature_map")),
    };
    let (vocab, len, dim) = (num("vocab_size")?, num("response_len")?, num("query_dim")?);
    let (n_train, n_test) = (num("n_train")?, num("n_test")?);

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for (i, line) in lines.enumerate() {
        let lineno = i + 3;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(lineno, "expected 4 tab-separated columns"));
        }
        let id: u64 = cols[0].parse().map_err(|_| bad(lineno, "invalid id"))?;
        let features = cols[2]
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(lineno, "invalid feature"))?;
        let tokens = cols[3]
            .split_whitespace()
            .map(|x| x.parse::<Token>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad(lineno, "invalid answer token"))?;
        if features.len() != dim || tokens.len() != len || tokens.iter().any(|&t| t as usize >= vocab) {
            return Err(bad(lineno, "query does not match dataset shape"));
        }
        let expected = (train.len() + test.len()) as u64;
        if id != expected {
            return Err(bad(lineno, "ids must be contiguous, train before test"));
        }
        let q = Query {
            id,
            features,
            answer: TokenSequence::new(tokens),
        };
        match cols[1] {
            "train" if test.is_empty() => train.push(q),
            "test" => test.push(q),
            _ => return Err(bad(lineno, "invalid split")),
        }
    }
    if train.len() != n_train || test.len() != n_test {
        return Err(Error::config("dataset split sizes do not match header"));
    }
    Ok(Dataset {
        family,
        train,
        test,
        vocab_size: vocab,
        response_len: len,
        query_dim: dim,
        feature_map: FeatureMap::new(kind, dim, len, vocab, n_train + n_test)?,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, export_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    import_dataset(&text)
}
