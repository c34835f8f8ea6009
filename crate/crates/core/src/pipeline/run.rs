use serde::{Deserialize, Serialize};

use crate::environment::{generate_task, Dataset};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::learner::{train_round, RunState};
use crate::rng::Purpose;

use super::config::{ExperimentConfig, SweepPoint};
use super::eval::{evaluate_pass1, EvalKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub round: u64,
    pub train_pass1: f64,
    pub test_pass1: f64,
    /// Mean round objective since the previous evaluation (0 at round 0).
    pub objective: f64,
    /// Mean per-rollout KL to the reference since the previous evaluation.
    pub kl: f64,
    pub rollouts_consumed: u64,
}

/// Running sums between evaluations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub objective_sum: f64,
    pub kl_sum: f64,
    pub rounds: u64,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything needed to continue a trial exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub artifact_version: String,
    pub experiment: ExperimentConfig,
    pub point: SweepPoint,
    pub state: RunState,
    pub metrics: Vec<MetricRecord>,
    pub window: Window,
}

/// One sweep point trained under one seed.
#[derive(Debug, Clone)]
pub struct Trial {
    pub experiment: ExperimentConfig,
    pub point: SweepPoint,
    pub state: RunState,
    pub metrics: Vec<MetricRecord>,
    window: Window,
}

impl Trial {
    /// Fresh trial with its round-0 evaluation recorded.
    pub fn new(
        experiment: &ExperimentConfig,
        point: &SweepPoint,
        seed: u64,
        ds: &Dataset,
        mode: ExecMode,
    ) -> Result<Self> {
        let mut trial = Self {
            experiment: experiment.clone(),
            point: point.clone(),
            state: RunState::new(ds, &point.train, seed),
            metrics: Vec::new(),
            window: Window::default(),
        };
        trial.record(ds, mode)?;
        Ok(trial)
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            experiment: ckpt.experiment,
            point: ckpt.point,
            state: ckpt.state,
            metrics: ckpt.metrics,
            window: ckpt.window,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            artifact_version: env!("CARGO_PKG_VERSION").to_string(),
            experiment: self.experiment.clone(),
            point: self.point.clone(),
            state: self.state.clone(),
            metrics: self.metrics.clone(),
            window: self.window.clone(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.state.seed
    }

    fn record(&mut self, ds: &Dataset, mode: ExecMode) -> Result<()> {
        let sp = self.point.train.sampling(ds.response_len)?;
        let n = self.experiment.eval_samples_per_query;
        let key = |purpose| EvalKey {
            seed: self.state.seed,
            purpose,
            round: self.state.round,
        };
        let params = &self.state.params;
        let map = &ds.feature_map;
        let train_pass1 = evaluate_pass1(params, map, &ds.train, &sp, n, key(Purpose::EvalTrain), mode)?;
        let test_pass1 = evaluate_pass1(params, map, &ds.test, &sp, n, key(Purpose::EvalTest), mode)?;
        let w = std::mem::take(&mut self.window);
        let denom = w.rounds.max(1) as f64;
        self.metrics.push(MetricRecord {
            round: self.state.round,
            train_pass1,
            test_pass1,
            objective: w.objective_sum / denom,
            kl: w.kl_sum / denom,
            rollouts_consumed: self.state.rollouts_consumed,
        });
        Ok(())
    }

    /// Trains until `until_round`, evaluating every `eval_every` rounds and
    /// calling `on_eval` after each evaluation.
    pub fn advance(
        &mut self,
        ds: &Dataset,
        until_round: u64,
        mode: ExecMode,
        mut on_eval: impl FnMut(&Trial) -> Result<()>,
    ) -> Result<()> {
        while self.state.round < until_round {
            let stats = train_round(&mut self.state, ds, &self.point.train, mode)?;
            self.window.objective_sum += stats.objective;
            self.window.kl_sum += stats.kl;
            self.window.rounds += 1;
            if self.state.round.is_multiple_of(self.experiment.eval_every) {
                self.record(ds, mode)?;
                on_eval(self)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub label: String,
    pub seed: u64,
    pub metrics: Vec<MetricRecord>,
}

/// Validates the whole experiment (sweep expansion, preset identities,
/// dataset generation) before any training happens.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Vec<SweepPoint>, Dataset)> {
    let points = cfg.sweep_points()?;
    let ds = generate_task(&cfg.task)?;
    for p in &points {
        if p.train.batch_size > ds.train.len() {
            return Err(Error::config(format!(
                "batch size {} exceeds the train split",
                p.train.batch_size
            )));
        }
    }
    Ok((points, ds))
}

/// Runs every sweep point under every seed for `total_rounds` rounds.
///
/// Results come back ordered by sweep point, then seed.
pub fn run_experiment(cfg: &ExperimentConfig, mode: ExecMode) -> Result<Vec<TrialResult>> {
    let (points, ds) = prepare(cfg)?;
    let jobs: Vec<(&SweepPoint, u64)> = points
        .iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    exec::map_indexed(mode, jobs.len(), |i| {
        let (point, seed) = jobs[i];
        let mut trial = Trial::new(cfg, point, seed, &ds, mode)?;
        trial.advance(&ds, cfg.total_rounds, mode, |_| Ok(()))?;
        Ok(TrialResult {
            label: point.label.clone(),
            seed,
            metrics: trial.metrics,
        })
    })
    .into_iter()
    .collect()
}
