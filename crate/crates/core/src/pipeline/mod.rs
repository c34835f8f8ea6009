//! Experiment presets, sweep expansion, evaluation, on-disk artifacts and reports.

pub mod config;
pub mod eval;
pub mod io;
pub mod run;
pub mod summary;

pub use config::{budget_pairs, resolve_config, ExperimentConfig, Preset, SweepConfig, SweepPoint};
pub use eval::{evaluate_pass1, EvalKey};
pub use io::{resume, run_to_dir, write_report};
pub use run::{run_experiment, Checkpoint, MetricRecord, Trial, TrialResult};
pub use summary::{summarize, LabelSummary, SeriesSummary};
