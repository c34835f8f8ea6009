//! Start/end/delta summaries, time-to-threshold and pointwise medians.

use serde::{Deserialize, Serialize};

use super::run::{MetricRecord, TrialResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub first: f64,
    pub last: f64,
    pub delta: f64,
    /// `(threshold, earliest round reaching it)`, `None` when never reached.
    pub time_to: Vec<(f64, Option<u64>)>,
}

impl SeriesSummary {
    pub fn time_to(&self, threshold: f64) -> Option<u64> {
        self.time_to
            .iter()
            .find(|(t, _)| *t == threshold)
            .and_then(|&(_, r)| r)
    }
}

/// Summarizes one series; `rounds` and `values` are aligned and non-empty.
pub fn summarize_series(rounds: &[u64], values: &[f64], thresholds: &[f64]) -> SeriesSummary {
    assert!(!values.is_empty() && rounds.len() == values.len(), "empty or misaligned series");
    let first = values[0];
    let last = *values.last().unwrap();
    let time_to = thresholds
        .iter()
        .map(|&t| (t, rounds.iter().zip(values).find(|(_, &v)| v >= t).map(|(&r, _)| r)))
        .collect();
    SeriesSummary {
        first,
        last,
        delta: last - first,
        time_to,
    }
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of rounds-to-threshold, with unreached counted as +∞.
pub fn median_time(times: &[Option<u64>]) -> Option<u64> {
    let v: Vec<f64> = times
        .iter()
        .map(|t| t.map_or(f64::INFINITY, |r| r as f64))
        .collect();
    let m = median(&v);
    m.is_finite().then(|| m.round() as u64)
}

/// Pointwise median over series, truncated to the shortest.
pub fn median_curve(series: &[Vec<f64>]) -> Vec<f64> {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| median(&series.iter().map(|s| s[i]).collect::<Vec<_>>()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub train: SeriesSummary,
    pub test: SeriesSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub label: String,
    pub seeds: usize,
    pub rounds: Vec<u64>,
    pub rollouts_consumed: Vec<u64>,
    pub train_median: Vec<f64>,
    pub test_median: Vec<f64>,
    /// Summary of the median curves.
    pub train: SeriesSummary,
    pub test: SeriesSummary,
    /// Median across seeds of each run's time-to-threshold.
    pub train_time_to: Vec<(f64, Option<u64>)>,
    pub test_time_to: Vec<(f64, Option<u64>)>,
}

fn split(metrics: &[MetricRecord]) -> (Vec<u64>, Vec<f64>, Vec<f64>) {
    (
        metrics.iter().map(|m| m.round).collect(),
        metrics.iter().map(|m| m.train_pass1).collect(),
        metrics.iter().map(|m| m.test_pass1).collect(),
    )
}

pub fn summarize_run(r: &TrialResult, thresholds: &[f64]) -> RunSummary {
    let (rounds, train, test) = split(&r.metrics);
    RunSummary {
        label: r.label.clone(),
        seed: r.seed,
        train: summarize_series(&rounds, &train, thresholds),
        test: summarize_series(&rounds, &test, thresholds),
    }
}

/// Groups runs by label (first-seen order) and computes medians across seeds.
pub fn summarize(results: &[TrialResult], thresholds: &[f64]) -> Vec<LabelSummary> {
    let mut labels: Vec<&str> = Vec::new();
    for r in results {
        if !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels
        .into_iter()
        .map(|label| {
            let runs: Vec<&TrialResult> = results.iter().filter(|r| r.label == label).collect();
            let len = runs.iter().map(|r| r.metrics.len()).min().unwrap_or(0);
            let base = &runs[0].metrics[..len];
            let rounds: Vec<u64> = base.iter().map(|m| m.round).collect();
            let rollouts: Vec<u64> = base.iter().map(|m| m.rollouts_consumed).collect();
            let curves = |f: fn(&MetricRecord) -> f64| {
                median_curve(&runs.iter().map(|r| r.metrics.iter().map(f).collect()).collect::<Vec<_>>())
            };
            let train_median = curves(|m| m.train_pass1);
            let test_median = curves(|m| m.test_pass1);
            let per_run: Vec<RunSummary> = runs.iter().map(|r| summarize_run(r, thresholds)).collect();
            let times = |pick: fn(&RunSummary) -> &SeriesSummary| {
                thresholds
                    .iter()
                    .map(|&t| {
                        let ts: Vec<Option<u64>> = per_run.iter().map(|s| pick(s).time_to(t)).collect();
                        (t, median_time(&ts))
                    })
                    .collect()
            };
            LabelSummary {
                label: label.to_string(),
                seeds: runs.len(),
                train: summarize_series(&rounds, &train_median, thresholds),
                test: summarize_series(&rounds, &test_median, thresholds),
                train_time_to: times(|s| &s.train),
                test_time_to: times(|s| &s.test),
                rounds,
                rollouts_consumed: rollouts,
                train_median,
                test_median,
            }
        })
        .collect()
}
