//! Experiment configuration: presets, TOML resolution and sweep expansion.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::environment::{FeatureKind, TaskSpec};
use crate::error::{Error, Result};
use crate::learner::{AdvantageMode, MaskMode, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Exp1Baseline,
    Exp2Advantage,
    Exp3Rollouts,
    Exp4Batch,
    Exp5Tradeoff,
    Exp6Replay,
    Exp7Ceiling,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Exp1Baseline,
        Preset::Exp2Advantage,
        Preset::Exp3Rollouts,
        Preset::Exp4Batch,
        Preset::Exp5Tradeoff,
        Preset::Exp6Replay,
        Preset::Exp7Ceiling,
        Preset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Exp1Baseline => "exp1-baseline",
            Preset::Exp2Advantage => "exp2-advantage",
            Preset::Exp3Rollouts => "exp3-rollouts",
            Preset::Exp4Batch => "exp4-batch",
            Preset::Exp5Tradeoff => "exp5-tradeoff",
            Preset::Exp6Replay => "exp6-replay",
            Preset::Exp7Ceiling => "exp7-ceiling",
            Preset::Custom => "custom",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    /// Accepts full names (`exp3-rollouts`) and short forms (`exp3`).
    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s || p.name().split('-').next() == Some(s))
            .ok_or_else(|| Error::config(format!("unknown preset `{s}`")))
    }
}

/// Sweep axes. Which fields a preset reads is listed on each field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// exp3: rollouts per query.
    pub rollouts: Vec<usize>,
    /// exp4, exp7: batch sizes. exp5: restricts the budget pairs (empty = all).
    pub batch_sizes: Vec<usize>,
    /// exp5: batch × rollouts. exp6: batch × (current + replay).
    pub budget: usize,
    /// exp6: replayed rollouts per query.
    pub replay: Vec<usize>,
    /// exp6: current + replay rollouts per query.
    pub replay_group: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rollouts: vec![1, 8, 16, 32, 64],
            batch_sizes: vec![],
            budget: 256,
            replay: vec![7, 6, 4],
            replay_group: 8,
        }
    }
}

/// Provenance block appended to resolved configs written as run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestInfo {
    pub artifact_version: String,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// sha256 of every emitted metric file, keyed by path relative to the output directory.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub total_rounds: u64,
    pub eval_every: u64,
    pub eval_samples_per_query: usize,
    pub seeds: Vec<u64>,
    /// Pass@1 levels for time-to-threshold summaries.
    pub thresholds: Vec<f64>,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub sweep: SweepConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<ManifestInfo>,
}

impl ExperimentConfig {
    /// Defaults for `preset`.
    pub fn preset(preset: Preset) -> Self {
        let grpo = TrainConfig {
            advantage_mode: AdvantageMode::Grpo,
            rollouts_per_query: 8,
            ..TrainConfig::default()
        };
        let mut task = TaskSpec::default();
        let train = match preset {
            Preset::Exp1Baseline | Preset::Custom => TrainConfig::default(),
            Preset::Exp2Advantage => TrainConfig {
                gradient_mask: MaskMode::FirstOnly,
                ..grpo
            },
            Preset::Exp3Rollouts | Preset::Exp4Batch | Preset::Exp5Tradeoff | Preset::Exp6Replay => {
                grpo
            }
            Preset::Exp7Ceiling => {
                task.n_train = 2048;
                task.n_test = 512;
                TrainConfig {
                    rollouts_per_query: 1,
                    replay_rollouts: 7,
                    ..grpo
                }
            }
        };
        let sweep = SweepConfig {
            batch_sizes: match preset {
                Preset::Exp4Batch => vec![32, 128],
                Preset::Exp7Ceiling => vec![256, 512, 1024, 2048],
                _ => vec![],
            },
            ..SweepConfig::default()
        };
        Self {
            preset,
            total_rounds: 5000,
            eval_every: 100,
            eval_samples_per_query: 8,
            seeds: vec![0, 1, 2, 3, 4],
            thresholds: vec![0.5, 0.9],
            train,
            task,
            sweep,
            manifest: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be positive"));
        }
        if self.eval_samples_per_query == 0 {
            return Err(Error::config("eval_samples_per_query must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must not be empty"));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::config("thresholds must lie in [0, 1]"));
        }
        self.task.validate()?;
        self.train.validate()
    }

    /// Expands the preset into concrete sweep points, checking preset
    /// identities ([`Error::Constraint`]) and batch feasibility ([`Error::Config`]).
    pub fn sweep_points(&self) -> Result<Vec<SweepPoint>> {
        self.validate()?;
        let base = &self.train;
        let violated = |msg: String| Err(Error::Constraint(format!("{}: {msg}", self.preset)));
        let point = |label: String, train: TrainConfig| SweepPoint { label, train };
        let points = match self.preset {
            Preset::Custom => vec![point("custom".into(), base.clone())],
            Preset::Exp1Baseline => {
                if base.rollouts_per_query != 1
                    || base.advantage_mode != AdvantageMode::RawReward
                    || base.replay_rollouts != 0
                {
                    return violated(
                        "the minimalist baseline uses one rollout, raw reward and no replay".into(),
                    );
                }
                vec![point("baseline".into(), base.clone())]
            }
            Preset::Exp2Advantage => {
                if base.advantage_mode != AdvantageMode::Grpo
                    || base.gradient_mask != MaskMode::FirstOnly
                    || base.replay_rollouts != 0
                {
                    return violated("needs grpo advantage with a first-rollout gradient mask".into());
                }
                vec![point(format!("G{}-first", base.rollouts_per_query), base.clone())]
            }
            Preset::Exp3Rollouts => {
                if self.sweep.rollouts.is_empty() || base.advantage_mode != AdvantageMode::Grpo {
                    return violated("needs grpo advantage and at least one rollout count".into());
                }
                let support = self.sweep.replay_group;
                self.sweep
                    .rollouts
                    .iter()
                    .map(|&g| {
                        let train = if g == 1 {
                            // A single rollout has no group statistics; fall back to
                            // the exp2 scheme: sample a support group, update on the first.
                            TrainConfig {
                                rollouts_per_query: support,
                                gradient_mask: MaskMode::FirstOnly,
                                ..base.clone()
                            }
                        } else {
                            TrainConfig {
                                rollouts_per_query: g,
                                gradient_mask: MaskMode::All,
                                ..base.clone()
                            }
                        };
                        point(format!("G{g}"), train)
                    })
                    .collect()
            }
            Preset::Exp4Batch | Preset::Exp7Ceiling => {
                if self.sweep.batch_sizes.is_empty() {
                    return violated("needs at least one batch size".into());
                }
                if self.preset == Preset::Exp7Ceiling && base.replay_rollouts == 0 {
                    return violated("the ceiling sweep runs with replay".into());
                }
                self.sweep
                    .batch_sizes
                    .iter()
                    .map(|&b| {
                        point(
                            format!("B{b}"),
                            TrainConfig {
                                batch_size: b,
                                ..base.clone()
                            },
                        )
                    })
                    .collect()
            }
            Preset::Exp5Tradeoff => {
                let budget = self.sweep.budget;
                if budget == 0 {
                    return violated("budget must be positive".into());
                }
                if let Some(&b) = self.sweep.batch_sizes.iter().find(|&&b| b == 0 || !budget.is_multiple_of(b)) {
                    return violated(format!("batch size {b} does not divide the budget {budget}"));
                }
                budget_pairs(budget)
                    .into_iter()
                    .filter(|(b, _)| self.sweep.batch_sizes.is_empty() || self.sweep.batch_sizes.contains(b))
                    .map(|(b, g)| {
                        // One rollout per query has no group to normalize over; its
                        // signal is the raw reward.
                        let mode = if g == 1 { AdvantageMode::RawReward } else { base.advantage_mode };
                        point(
                            format!("B{b}-G{g}"),
                            TrainConfig {
                                batch_size: b,
                                rollouts_per_query: g,
                                advantage_mode: mode,
                                gradient_mask: MaskMode::All,
                                replay_rollouts: 0,
                                ..base.clone()
                            },
                        )
                    })
                    .collect()
            }
            Preset::Exp6Replay => {
                let group = self.sweep.replay_group;
                let b = base.batch_size;
                if b * group != self.sweep.budget {
                    return violated(format!(
                        "batch {b} x (current + replay) {group} must equal the budget {}",
                        self.sweep.budget
                    ));
                }
                if base.advantage_mode != AdvantageMode::Grpo {
                    return violated("replay supports grpo advantages only".into());
                }
                let mut ks: Vec<usize> = vec![0];
                ks.extend(self.sweep.replay.iter().copied().filter(|&k| k != 0));
                let mut out = Vec::new();
                for k in ks {
                    if k >= group {
                        return violated(format!("replay {k} leaves no current rollouts in a group of {group}"));
                    }
                    let c = group - k;
                    out.push(point(
                        format!("B{b}-c{c}-k{k}"),
                        TrainConfig {
                            rollouts_per_query: c,
                            replay_rollouts: k,
                            replay_capacity: 0,
                            gradient_mask: MaskMode::All,
                            ..base.clone()
                        },
                    ));
                }
                out
            }
        };
        for p in &points {
            p.train.validate()?;
            if p.train.batch_size > self.task.n_train {
                return Err(Error::config(format!(
                    "sweep point {} uses batch size {} but task.n_train is {}",
                    p.label, p.train.batch_size, self.task.n_train
                )));
            }
        }
        Ok(points)
    }
}

/// One concrete training configuration within an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub train: TrainConfig,
}

/// All `(B, budget / B)` with `B` dividing `budget`, ascending in `B`.
pub fn budget_pairs(budget: usize) -> Vec<(usize, usize)> {
    (1..=budget)
        .filter(|b| budget.is_multiple_of(*b))
        .map(|b| (b, budget / b))
        .collect()
}

fn lookup<'a>(root: &'a toml::Value, path: &str) -> Option<&'a toml::Value> {
    path.split('.').try_fold(root, |v, k| v.as_table()?.get(k))
}

fn merge(base: &mut toml::Table, over: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        if prefix.is_empty() && k == "manifest" {
            continue;
        }
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(bt)), toml::Value::Table(ot)) => merge(bt, ot, &key)?,
            (Some(slot), _) => *slot = v.clone(),
            (None, _) => return Err(Error::config(format!("unknown key `{key}`"))),
        }
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Reads the `preset` key of a config file without resolving it.
pub fn peek_preset(file: &str) -> Result<Option<Preset>> {
    let table: toml::Table =
        toml::from_str(file).map_err(|e| Error::config(format!("config file: {e}")))?;
    match table.get("preset") {
        None => Ok(None),
        Some(toml::Value::String(s)) => s.parse().map(Some),
        Some(_) => Err(Error::config("key `preset` must be a string")),
    }
}

/// Builds a configuration from preset defaults, an optional TOML file, and
/// `key=value` overrides (dotted paths; every key must already exist).
///
/// Precedence: overrides > file > preset defaults. The preset comes from
/// `preset`, else the file's `preset` key, else exp1.
pub fn resolve_config(
    file: Option<&str>,
    preset: Option<Preset>,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let file_table: toml::Table = match file {
        Some(text) => toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?,
        None => toml::Table::new(),
    };
    let preset = match preset {
        Some(p) => p,
        None => file.map(peek_preset).transpose()?.flatten().unwrap_or(Preset::Exp1Baseline),
    };
    let defaults = ExperimentConfig::preset(preset);
    let mut root = toml::Value::try_from(&defaults)
        .map_err(|e| Error::config(format!("serializing defaults: {e}")))?;
    let toml::Value::Table(table) = &mut root else {
        unreachable!("config serializes to a table")
    };
    let mut file_table = file_table;
    file_table.remove("preset");
    merge(table, &file_table, "")?;
    table.insert("preset".into(), toml::Value::String(preset.name().into()));

    let mut lr_explicit = lookup(&toml::Value::Table(file_table.clone()), "train.learning_rate").is_some();
    for (key, raw) in overrides {
        if key == "preset" || key == "manifest" || key.starts_with("manifest.") {
            return Err(Error::config(format!("key `{key}` cannot be overridden")));
        }
        if lookup(&root, key).is_none() {
            return Err(Error::config(format!("unknown key `{key}`")));
        }
        lr_explicit |= key == "train.learning_rate";
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(part))
                .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        }
        *slot = parse_value(raw);
    }

    let mut cfg: ExperimentConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
    if cfg.task.feature_map == FeatureKind::Tabular && !lr_explicit {
        cfg.train.learning_rate = 5e-2;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::config(format!("serializing config: {e}")))
}
