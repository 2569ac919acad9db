//! `vsm`: train, evaluate and ablate the few-shot engine.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.

use clap::{Parser, Subcommand};
use vsm_cli::commands::{self, SplitArg};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "vsm", version, about = "Few-shot meta-learning with variational semantic memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML config, writing metrics and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset split (memory frozen).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Defaults to the config's eval_episodes.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and compare grid points (alpha=0:1:0.1 or mode=a,b,c), writing CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump sampled prototypes and posterior means to CSV.
    DumpPrototypes {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => commands::cmd_train(&config, seed, &out),
        Command::Eval {
            checkpoint,
            split,
            episodes,
            seed,
        } => commands::cmd_eval(&checkpoint, split.into(), episodes, seed),
        Command::Ablate {
            config,
            grid,
            out,
            seed,
        } => commands::cmd_ablate(&config, &grid, &out, seed),
        Command::DumpPrototypes {
            checkpoint,
            episodes,
            out,
            seed,
        } => commands::cmd_dump_prototypes(&checkpoint, episodes, &out, seed),
    };
    if let Err(e) = result {
        eprintln!("error: {:#}", e.source);
        std::process::exit(e.code);
    }
}
