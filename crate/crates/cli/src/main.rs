//! `rftlab` command-line driver.
//!
//! ```text
//! rftlab run --preset exp3 --seeds 0,1,2 --rounds 2000
//! rftlab run --config my.toml --set train.clip_eps=0.1
//! rftlab resume runs/exp1-baseline/baseline/seed-0/ckpt-0000001000.json --rounds 1000
//! rftlab report runs
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rftlab_core::exec::{self, ExecMode};
use rftlab_core::pipeline::config::{peek_preset, resolve_config, Preset};
use rftlab_core::pipeline::io::{resume, run_to_dir, write_report};
use rftlab_core::Error;

#[derive(Parser)]
#[command(name = "rftlab", version, about = "Outcome-reward policy-gradient experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset or config file.
    Run(Box<RunArgs>),
    /// Continue a trial from one of its checkpoints.
    Resume {
        checkpoint: PathBuf,
        /// Additional rounds to train.
        #[arg(long)]
        rounds: u64,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Summarize every run below a directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct ExecArgs {
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

impl ExecArgs {
    fn mode(&self) -> ExecMode {
        if self.sequential {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// exp1 .. exp7 or custom; overrides the config file's preset.
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file (a run's manifest.toml works too).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training rounds per trial.
    #[arg(long)]
    rounds: Option<u64>,
    /// Batch size; a comma list for sweeps over batch size (exp4, exp5, exp7).
    #[arg(long, value_delimiter = ',')]
    batch_size: Option<Vec<usize>>,
    /// Rollouts per query; a comma list for exp3.
    #[arg(long, value_delimiter = ',')]
    rollouts: Option<Vec<usize>>,
    /// Replayed rollouts per query; a comma list for exp6.
    #[arg(long, value_delimiter = ',')]
    replay: Option<Vec<usize>>,
    /// Rollout budget per round for exp5/exp6.
    #[arg(long)]
    budget: Option<usize>,
    /// Output root; the run goes to `<out>/<name>`.
    #[arg(long, env = "RFTLAB_OUT", default_value = "runs")]
    out: PathBuf,
    /// Run directory name below `--out` (default: the preset name).
    #[arg(long)]
    name: Option<String>,
    /// Dotted-key override, e.g. `train.kl_coeff=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(flatten)]
    exec: ExecArgs,
}

fn list(v: &[impl ToString]) -> String {
    format!("[{}]", v.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
}

fn single<T: Copy>(flag: &str, v: &[T]) -> Result<T, Error> {
    match v {
        [x] => Ok(*x),
        _ => Err(Error::Config(format!("--{flag} takes a single value for this preset"))),
    }
}

/// Turns the convenience flags into dotted-key overrides. Sweep flags map to
/// the sweep axis the preset actually varies.
fn flag_overrides(args: &RunArgs, preset: Preset) -> Result<Vec<(String, String)>, Error> {
    let mut o = Vec::new();
    let mut push = |k: &str, v: String| o.push((k.to_string(), v));
    if let Some(s) = args.seed {
        push("seeds", list(&[s]));
    }
    if let Some(s) = &args.seeds {
        push("seeds", list(s));
    }
    if let Some(r) = args.rounds {
        push("total_rounds", r.to_string());
    }
    if let Some(b) = &args.batch_size {
        match preset {
            Preset::Exp4Batch | Preset::Exp5Tradeoff | Preset::Exp7Ceiling => {
                push("sweep.batch_sizes", list(b))
            }
            _ => push("train.batch_size", single("batch-size", b)?.to_string()),
        }
    }
    if let Some(g) = &args.rollouts {
        match preset {
            Preset::Exp3Rollouts => push("sweep.rollouts", list(g)),
            _ => push("train.rollouts_per_query", single("rollouts", g)?.to_string()),
        }
    }
    if let Some(k) = &args.replay {
        match preset {
            Preset::Exp6Replay => push("sweep.replay", list(k)),
            _ => push("train.replay_rollouts", single("replay", k)?.to_string()),
        }
    }
    if let Some(b) = args.budget {
        push("sweep.budget", b.to_string());
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        push(k.trim(), v.trim().to_string());
    }
    Ok(o)
}

fn read(path: &Path) -> Result<String, Error> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn cmd_run(args: &RunArgs) -> Result<(), Error> {
    let file = args.config.as_deref().map(read).transpose()?;
    let preset = match &args.preset {
        Some(p) => Some(p.parse::<Preset>()?),
        None => file.as_deref().map(peek_preset).transpose()?.flatten(),
    };
    let overrides = flag_overrides(args, preset.unwrap_or(Preset::Exp1Baseline))?;
    let cfg = resolve_config(file.as_deref(), preset, &overrides)?;
    let dir = args.out.join(args.name.as_deref().unwrap_or(cfg.preset.name()));
    let out = exec::with_jobs(args.exec.jobs, || run_to_dir(&cfg, &dir, args.exec.mode()))?;
    for (r, d) in out.results.iter().zip(&out.trial_dirs) {
        let (first, last) = (&r.metrics[0], r.metrics.last().unwrap());
        println!(
            "{:<16} seed {:<4} train {:.3} -> {:.3}  test {:.3} -> {:.3}  {}",
            r.label,
            r.seed,
            first.train_pass1,
            last.train_pass1,
            first.test_pass1,
            last.test_pass1,
            d.display()
        );
    }
    println!("manifest: {}", out.manifest.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Constraint(_) => 3,
        Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Resume {
            checkpoint,
            rounds,
            exec: e,
        } => exec::with_jobs(e.jobs, || resume(checkpoint, *rounds, e.mode())).map(|dir| {
            println!("{}", dir.display());
        }),
        Command::Report { dir } => write_report(dir).map(|r| {
            print!("{}", r.text);
            println!("report: {}", r.dir.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rftlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
