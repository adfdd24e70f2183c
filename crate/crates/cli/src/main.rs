//! `simulstream`: generate toy corpora, train, run streaming inference and
//! evaluate quality against latency.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use simulstream::model::ChunkSize;

use config::{ChunkMode, ClockKind, Mode, RunConfig};

/// An invocation that cannot be run as given.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "simulstream", version, about = "Simultaneous speech-to-unit translation on toy data")]
struct Cli {
    /// TOML run configuration; flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed for data generation and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate train, valid and test corpora.
    GenData(GenDataArgs),
    /// Train a model, or resume training from a checkpoint.
    Train(TrainArgs),
    /// Run offline, simultaneous or wait-k inference over a corpus and score it.
    Eval(EvalArgs),
    /// Evaluate simultaneous inference over a grid of chunk sizes.
    Curve(CurveArgs),
    /// Dump probe alignments and emission points for one sample.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of training samples.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Standard deviation of frame noise.
    #[arg(long)]
    noise_std: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training corpus file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Training checkpoint to resume from.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total number of optimisation steps, counting resumed ones.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, value_enum)]
    chunk_mode: Option<ChunkMode>,
    /// Chunk size for `--chunk-mode fixed`.
    #[arg(long = "C")]
    chunk: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct InferenceArgs {
    /// Model or training checkpoint directory.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluation corpus file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, value_enum)]
    clock: Option<ClockKind>,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Chunk size in frames for simul mode, or `inf`.
    #[arg(long = "C")]
    chunk: Option<ChunkSize>,
    /// Wait-k lag in 320 ms chunks.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Debug, Args)]
struct CurveArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated chunk sizes, e.g. `2,4,8,16,inf`.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<ChunkSize>>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[command(flatten)]
    inference: InferenceArgs,
    /// Write the dump here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Index of the sample within the corpus.
    #[arg(long)]
    sample: Option<usize>,
    /// Chunk size in frames, or `inf`.
    #[arg(long = "C")]
    chunk: Option<ChunkSize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn apply_inference(cfg: &mut RunConfig, a: InferenceArgs) {
    set_opt(&mut cfg.paths.ckpt, a.ckpt);
    set_opt(&mut cfg.paths.corpus, a.corpus);
    set(&mut cfg.eval.clock, a.clock);
    set_opt(&mut cfg.eval.limit, a.limit);
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.seed, cli.seed);
    match cli.command {
        Command::GenData(a) => {
            set_opt(&mut cfg.paths.out, a.out);
            set(&mut cfg.data.n, a.n);
            set_opt(&mut cfg.data.n_valid, a.n_valid);
            set_opt(&mut cfg.data.n_test, a.n_test);
            set(&mut cfg.data.toy.noise_std, a.noise_std);
            commands::gen_data(&cfg)
        }
        Command::Train(a) => {
            set_opt(&mut cfg.paths.corpus, a.corpus);
            set_opt(&mut cfg.paths.ckpt, a.ckpt);
            set_opt(&mut cfg.paths.out, a.out);
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.train.chunk_mode, a.chunk_mode);
            set_opt(&mut cfg.train.chunk, a.chunk);
            set(&mut cfg.train.batch_size, a.batch_size);
            commands::train(&cfg)
        }
        Command::Eval(a) => {
            apply_inference(&mut cfg, a.inference);
            set_opt(&mut cfg.paths.out, a.out);
            set(&mut cfg.eval.mode, a.mode);
            set_opt(&mut cfg.eval.chunk, a.chunk);
            set_opt(&mut cfg.eval.k, a.k);
            commands::eval(&cfg)
        }
        Command::Curve(a) => {
            apply_inference(&mut cfg, a.inference);
            set_opt(&mut cfg.paths.out, a.out);
            set(&mut cfg.eval.grid, a.grid);
            commands::curve(&cfg)
        }
        Command::Inspect(a) => {
            apply_inference(&mut cfg, a.inference);
            set_opt(&mut cfg.paths.out, a.out);
            set(&mut cfg.eval.sample, a.sample);
            set_opt(&mut cfg.eval.chunk, a.chunk);
            commands::inspect(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
