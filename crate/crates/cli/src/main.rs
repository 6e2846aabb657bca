mod commands;
mod config;
mod error;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use poss_core::draft::Span;
use poss_core::engine::Method;
use poss_core::training::Regime;

use config::{set, set_path, RunConfigFile};
use error::CliError;

/// Train a byte-level target, distil it, train draft banks and benchmark
/// speculative decoding against plain decoding.
#[derive(Parser, Debug)]
#[command(name = "poss", version)]
struct Cli {
    /// JSON run configuration with sections model, train, engine, bench, paths.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and engine.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Concurrent sweep cells.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the target model on a text corpus.
    TrainTarget(TrainTargetArgs),
    /// Record target features and top-K teacher distributions.
    Distill(DistillArgs),
    /// Train an EAGLE, HASS or PosS draft bank.
    TrainDraft(TrainDraftArgs),
    /// Benchmark one decoding configuration against vanilla decoding.
    Bench(BenchArgs),
    /// Benchmark the cross product of a sweep specification.
    Sweep(SweepArgs),
    /// Summarise benchmark reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct TrainTargetArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Maximum optimiser steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Teacher top-K size.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainDraftArgs {
    #[arg(long)]
    method: Option<Regime>,
    /// Positions per specialist, or `inf`.
    #[arg(long)]
    n: Option<Span>,
    /// Unroll depth of the multi-step regimes.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    distilled: Option<PathBuf>,
    /// EAGLE bank to initialise every specialist from (required for poss).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    total_tokens: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Prompt file, one prompt per line.
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Timed passes per method.
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Sweep specification file; defaults to bench.sweep of the config.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    single_draft_bank: Option<PathBuf>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Report JSON files or directories holding them.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfigFile::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.engine.seed = s;
    }
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::TrainTarget(a) => {
            set_path(&mut cfg.paths.corpus, &a.corpus);
            set(&mut cfg.train.target_steps, a.steps);
            commands::train_target(&cfg, out)
        }
        Command::Distill(a) => {
            set_path(&mut cfg.paths.target, &a.target);
            set_path(&mut cfg.paths.corpus, &a.corpus);
            set(&mut cfg.train.k, a.k);
            set(&mut cfg.train.window, a.window);
            commands::distill(&cfg, out)
        }
        Command::TrainDraft(a) => {
            set(&mut cfg.train.regime, a.method);
            set(&mut cfg.train.n, a.n);
            set(&mut cfg.train.unroll, a.depth);
            set(&mut cfg.train.steps, a.steps);
            set_path(&mut cfg.paths.target, &a.target);
            set_path(&mut cfg.paths.distilled, &a.distilled);
            set_path(&mut cfg.paths.init, &a.init);
            commands::train_draft(&cfg, out)
        }
        Command::Bench(a) => {
            let e = &mut cfg.engine;
            set(&mut e.method, a.method);
            set(&mut e.depth, a.depth);
            set(&mut e.width, a.width);
            set(&mut e.total_tokens, a.total_tokens);
            set(&mut e.temperature, a.temperature);
            set(&mut e.max_new_tokens, a.max_new_tokens);
            set(&mut cfg.bench.runs, a.runs);
            set_path(&mut cfg.paths.prompts, &a.prompts);
            set_path(&mut cfg.paths.target, &a.target);
            set_path(&mut cfg.paths.bank, &a.bank);
            commands::bench(&cfg, out)
        }
        Command::Sweep(a) => {
            set(&mut cfg.engine.max_new_tokens, a.max_new_tokens);
            set(&mut cfg.bench.runs, a.runs);
            set_path(&mut cfg.paths.prompts, &a.prompts);
            set_path(&mut cfg.paths.target, &a.target);
            set_path(&mut cfg.paths.bank, &a.bank);
            set_path(&mut cfg.paths.single_draft_bank, &a.single_draft_bank);
            if let Some(p) = &a.spec {
                cfg.bench.sweep = Some(sweep::SweepSpec::load(p)?);
            }
            sweep::run(&cfg, out, cli.jobs)
        }
        Command::Report(a) => commands::report(&a.inputs, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("poss: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
