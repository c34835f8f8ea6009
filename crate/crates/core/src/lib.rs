//! Desk-scale reinforcement fine-tuning laboratory.
//!
//! A linear-softmax sequence policy is fine-tuned on synthetic tasks with
//! binary verifiable rewards. The crate covers the whole loop:
//!
//! - [`environment`]: query generation, train/test splits, feature maps and the verifier.
//! - [`policy`]: sampling with temperature/top-p, per-token log-probabilities, exact KL.
//! - [`learner`]: raw-reward and group-normalized signals, the clipped surrogate
//!   objective with a KL penalty, its analytic gradient, Adam, and a training round.
//! - [`replay`]: per-query reward buffers that enlarge the advantage group.
//! - [`pipeline`]: Pass@1 evaluation, experiment presets and sweeps, metric files,
//!   checkpoints and summaries.
//!
//! Rollout generation and evaluation fan out over [`exec::ExecMode`]; every random
//! draw comes from a stream keyed by `(seed, purpose, indices)`, so parallel and
//! sequential execution produce bit-identical results.

pub mod environment;
pub mod error;
pub mod exec;
pub mod learner;
pub mod pipeline;
pub mod policy;
pub mod replay;
pub mod rng;

pub use error::{Error, Result};
