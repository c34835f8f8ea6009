//! On-disk layout of a run.
//!
//! ```text
//! <out>/manifest.toml                 resolved config + checksums of metric files
//! <out>/<label>/seed-<s>/run.json     trial metadata
//! <out>/<label>/seed-<s>/metrics.jsonl
//! <out>/<label>/seed-<s>/metrics.tsv
//! <out>/<label>/seed-<s>/params.bin   final policy parameters
//! <out>/<label>/seed-<s>/ckpt-<round>.json   latest two checkpoints
//! <out>/report/...                    written by `write_report`
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::environment::generate_task;
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};

use super::config::{to_toml, ExperimentConfig, ManifestInfo, Preset, SweepPoint};
use super::run::{prepare, Checkpoint, MetricRecord, Trial, TrialResult, CHECKPOINT_FORMAT_VERSION};
use super::summary::{summarize, summarize_run, LabelSummary};

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_TSV: &str = "metrics.tsv";
pub const RUN_META: &str = "run.json";
pub const MANIFEST: &str = "manifest.toml";
pub const PARAMS_BIN: &str = "params.bin";
pub const REPORT_DIR: &str = "report";
const CHECKPOINTS_KEPT: usize = 2;
const CHECKPOINT_MAGIC: &str = "rftlab-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMeta {
    pub preset: Preset,
    pub label: String,
    /// Position of the point in the preset's sweep, used to order reports.
    pub point_index: usize,
    pub seed: u64,
    pub total_rounds: u64,
    pub thresholds: Vec<f64>,
    pub train: crate::learner::TrainConfig,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn metrics_jsonl(metrics: &[MetricRecord]) -> String {
    metrics
        .iter()
        .map(|m| serde_json::to_string(m).expect("metric records serialize") + "\n")
        .collect()
}

/// Tab-separated columns; floats print in shortest round-trip form.
pub fn metrics_tsv(metrics: &[MetricRecord]) -> String {
    let mut out = String::from("round\ttrain_pass1\ttest_pass1\tobjective\tkl\trollouts_consumed\n");
    for m in metrics {
        let _ = writeln!(
            out,
            "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{}",
            m.round, m.train_pass1, m.test_pass1, m.objective, m.kl, m.rollouts_consumed
        );
    }
    out
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    read_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| Error::config(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Checkpoint text: a header line carrying the payload's sha256, then the JSON payload.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> String {
    let body = serde_json::to_string(ckpt).expect("checkpoints serialize");
    format!(
        "{CHECKPOINT_MAGIC} {} sha256={}\n{body}",
        ckpt.format_version,
        sha256_hex(body.as_bytes())
    )
}

pub fn decode_checkpoint(text: &str) -> Result<Checkpoint> {
    let (header, body) = text
        .split_once('\n')
        .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
    let mut parts = header.split(' ');
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Checkpoint("not an rftlab checkpoint".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing format version".into()))?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let sum = parts
        .next()
        .and_then(|s| s.strip_prefix("sha256="))
        .ok_or_else(|| Error::Checkpoint("missing checksum".into()))?;
    if sha256_hex(body.as_bytes()) != sum {
        return Err(Error::Checkpoint("checksum mismatch; file is corrupted".into()));
    }
    let ckpt: Checkpoint =
        serde_json::from_str(body).map_err(|e| Error::Checkpoint(format!("payload: {e}")))?;
    if ckpt.format_version != version {
        return Err(Error::Checkpoint("header and payload versions disagree".into()));
    }
    Ok(ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode_checkpoint(&text)
}

fn checkpoint_name(round: u64) -> String {
    format!("ckpt-{round:010}.json")
}

/// Checkpoints in `dir`, oldest first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".json"))
        })
        .collect();
    v.sort();
    Ok(v)
}

fn save_checkpoint(dir: &Path, trial: &Trial) -> Result<()> {
    let path = dir.join(checkpoint_name(trial.state.round));
    write(&path, encode_checkpoint(&trial.checkpoint()))?;
    let all = list_checkpoints(dir)?;
    for old in &all[..all.len().saturating_sub(CHECKPOINTS_KEPT)] {
        fs::remove_file(old).map_err(|e| Error::io(old, e))?;
    }
    Ok(())
}

fn write_trial_outputs(dir: &Path, trial: &Trial) -> Result<()> {
    let meta = TrialMeta {
        preset: trial.experiment.preset,
        label: trial.point.label.clone(),
        point_index: trial
            .experiment
            .sweep_points()
            .ok()
            .and_then(|ps| ps.iter().position(|p| p.label == trial.point.label))
            .unwrap_or(0),
        seed: trial.seed(),
        total_rounds: trial.state.round,
        thresholds: trial.experiment.thresholds.clone(),
        train: trial.point.train.clone(),
    };
    let meta_json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    write(&dir.join(RUN_META), meta_json + "\n")?;
    write(&dir.join(METRICS_JSONL), metrics_jsonl(&trial.metrics))?;
    write(&dir.join(METRICS_TSV), metrics_tsv(&trial.metrics))?;
    write(&dir.join(PARAMS_BIN), trial.state.params.to_bytes())?;
    if list_checkpoints(dir)?.last() != Some(&dir.join(checkpoint_name(trial.state.round))) {
        save_checkpoint(dir, trial)?;
    }
    Ok(())
}

/// Directory of one trial, relative to the run's output directory.
pub fn trial_subdir(label: &str, seed: u64) -> PathBuf {
    Path::new(label).join(format!("seed-{seed}"))
}

fn run_trial_in(
    dir: &Path,
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    seed: u64,
    ds: &crate::environment::Dataset,
    mode: ExecMode,
) -> Result<TrialResult> {
    mkdir(dir)?;
    let mut trial = Trial::new(cfg, point, seed, ds, mode)?;
    trial.advance(ds, cfg.total_rounds, mode, |t| save_checkpoint(dir, t))?;
    write_trial_outputs(dir, &trial)?;
    Ok(TrialResult {
        label: point.label.clone(),
        seed,
        metrics: trial.metrics,
    })
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: PathBuf,
    pub trial_dirs: Vec<PathBuf>,
    pub results: Vec<TrialResult>,
}

/// Runs the experiment and writes every artifact below `out`.
///
/// Everything is validated before the first directory is created, so a bad
/// configuration leaves no partial output behind.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, mode: ExecMode) -> Result<RunOutput> {
    let (points, ds) = prepare(cfg)?;
    let jobs: Vec<(&SweepPoint, u64)> = points
        .iter()
        .flat_map(|p| cfg.seeds.iter().map(move |&s| (p, s)))
        .collect();
    mkdir(out)?;
    let results: Vec<TrialResult> = exec::map_indexed(mode, jobs.len(), |i| {
        let (point, seed) = jobs[i];
        run_trial_in(&out.join(trial_subdir(&point.label, seed)), cfg, point, seed, &ds, mode)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let trial_dirs: Vec<PathBuf> = jobs
        .iter()
        .map(|(p, s)| out.join(trial_subdir(&p.label, *s)))
        .collect();
    let mut checksums = BTreeMap::new();
    for (p, s) in &jobs {
        for name in [METRICS_JSONL, METRICS_TSV] {
            let rel = trial_subdir(&p.label, *s).join(name);
            let bytes = fs::read(out.join(&rel)).map_err(|e| Error::io(&out.join(&rel), e))?;
            checksums.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
        }
    }
    let mut manifest_cfg = cfg.clone();
    manifest_cfg.manifest = Some(ManifestInfo {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.seeds.clone(),
        output_dir: out.display().to_string(),
        checksums,
    });
    let manifest = out.join(MANIFEST);
    write(&manifest, to_toml(&manifest_cfg)?)?;
    Ok(RunOutput {
        manifest,
        trial_dirs,
        results,
    })
}

/// Continues the trial stored in `checkpoint` for `additional_rounds` more
/// rounds, writing into the checkpoint's directory. The continuation is
/// identical to an uninterrupted run of the combined length.
pub fn resume(checkpoint: &Path, additional_rounds: u64, mode: ExecMode) -> Result<PathBuf> {
    let ckpt = load_checkpoint(checkpoint)?;
    let dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if additional_rounds == 0 {
        return Ok(dir);
    }
    let ds = generate_task(&ckpt.experiment.task)?;
    ckpt.state
        .params
        .check_map(&ds.feature_map)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut trial = Trial::from_checkpoint(ckpt);
    let target = trial.state.round + additional_rounds;
    trial.experiment.total_rounds = target;
    trial.advance(&ds, target, mode, |t| save_checkpoint(&dir, t))?;
    write_trial_outputs(&dir, &trial)?;
    Ok(dir)
}

#[derive(Debug, Clone)]
pub struct LoadedTrial {
    pub meta: TrialMeta,
    pub dir: PathBuf,
    pub metrics: Vec<MetricRecord>,
}

/// Finds every trial below `root` (skipping report directories).
pub fn load_trials(root: &Path) -> Result<Vec<LoadedTrial>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
        for e in entries.filter_map(|e| e.ok()) {
            let p = e.path();
            if p.is_dir() && p.file_name().is_some_and(|n| n != REPORT_DIR) {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == RUN_META) {
                let meta: TrialMeta = serde_json::from_str(&read_string(&p)?)
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
                let metrics = read_metrics(&dir.join(METRICS_JSONL))?;
                if !metrics.is_empty() {
                    found.push(LoadedTrial {
                        meta,
                        dir: dir.clone(),
                        metrics,
                    });
                }
            }
        }
    }
    found.sort_by(|a, b| a.dir.cmp(&b.dir));
    Ok(found)
}

#[derive(Debug, Clone)]
pub struct Report {
    pub dir: PathBuf,
    pub groups: Vec<(Preset, Vec<LabelSummary>)>,
    /// Human-readable table.
    pub text: String,
}

fn fmt_time(t: Option<u64>) -> String {
    t.map_or_else(|| "-".to_string(), |r| r.to_string())
}

/// Writes summary tables and plot-ready columnar files for every trial below
/// `root` into `<root>/report/`.
pub fn write_report(root: &Path) -> Result<Report> {
    let trials = load_trials(root)?;
    if trials.is_empty() {
        return Err(Error::config(format!("no metric files found under {}", root.display())));
    }
    let mut by_preset: BTreeMap<Preset, Vec<&LoadedTrial>> = BTreeMap::new();
    for t in &trials {
        by_preset.entry(t.meta.preset).or_default().push(t);
    }
    let out = root.join(REPORT_DIR);
    mkdir(&out)?;

    let mut summary = String::from("preset\tlabel\tseed\tsplit\tfirst\tlast\tdelta\tthreshold\tround\n");
    let mut text = String::new();
    let mut groups = Vec::new();
    for (preset, ts) in by_preset {
        let thresholds = ts[0].meta.thresholds.clone();
        let mut ordered: Vec<&LoadedTrial> = ts.clone();
        ordered.sort_by(|a, b| {
            (a.meta.point_index, &a.meta.label, a.meta.seed).cmp(&(b.meta.point_index, &b.meta.label, b.meta.seed))
        });
        let results: Vec<TrialResult> = ordered
            .iter()
            .map(|t| TrialResult {
                label: t.meta.label.clone(),
                seed: t.meta.seed,
                metrics: t.metrics.clone(),
            })
            .collect();
        for r in &results {
            let s = summarize_run(r, &thresholds);
            for (split, ss) in [("train", &s.train), ("test", &s.test)] {
                for (thr, round) in &ss.time_to {
                    let _ = writeln!(
                        summary,
                        "{preset}\t{}\t{}\t{split}\t{:?}\t{:?}\t{:?}\t{thr:?}\t{}",
                        r.label, r.seed, ss.first, ss.last, ss.delta, fmt_time(*round)
                    );
                }
            }
        }
        let labels = summarize(&results, &thresholds);
        let _ = writeln!(text, "== {preset} ==");
        for l in &labels {
            let _ = writeln!(
                text,
                "{:<16} seeds={} train {:.2} (from {:.2} to {:.2})  test {:.2} (from {:.2} to {:.2})  train t@{} = {}",
                l.label,
                l.seeds,
                l.train.delta,
                l.train.first,
                l.train.last,
                l.test.delta,
                l.test.first,
                l.test.last,
                thresholds.first().map_or("-".into(), |t| format!("{t}")),
                fmt_time(l.train_time_to.first().and_then(|x| x.1)),
            );
            for (split, ss, tt) in [("train", &l.train, &l.train_time_to), ("test", &l.test, &l.test_time_to)] {
                for (thr, round) in tt {
                    let _ = writeln!(
                        summary,
                        "{preset}\t{}\tmedian\t{split}\t{:?}\t{:?}\t{:?}\t{thr:?}\t{}",
                        l.label, ss.first, ss.last, ss.delta, fmt_time(*round)
                    );
                }
            }
        }

        for (split, pick) in [
            ("train", (|l: &LabelSummary| &l.train_median) as fn(&LabelSummary) -> &Vec<f64>),
            ("test", |l: &LabelSummary| &l.test_median),
        ] {
            let mut plot = String::from("round");
            for l in &labels {
                let _ = write!(plot, "\t{}", l.label);
            }
            plot.push('\n');
            let len = labels.iter().map(|l| l.rounds.len()).min().unwrap_or(0);
            for i in 0..len {
                let _ = write!(plot, "{}", labels[0].rounds[i]);
                for l in &labels {
                    let _ = write!(plot, "\t{:?}", pick(l)[i]);
                }
                plot.push('\n');
            }
            write(&out.join(format!("plot-{preset}-{split}.tsv")), plot)?;
        }
        let mut budget = String::from("label\tround\trollouts_consumed\ttrain_pass1\ttest_pass1\n");
        for l in &labels {
            for i in 0..l.rounds.len() {
                let _ = writeln!(
                    budget,
                    "{}\t{}\t{}\t{:?}\t{:?}",
                    l.label, l.rounds[i], l.rollouts_consumed[i], l.train_median[i], l.test_median[i]
                );
            }
        }
        write(&out.join(format!("plot-{preset}-budget.tsv")), budget)?;
        groups.push((preset, labels));
    }
    write(&out.join("summary.tsv"), summary)?;
    write(&out.join("summary.txt"), &text)?;
    Ok(Report { dir: out, groups, text })
}
