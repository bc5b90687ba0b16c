//! `akid` — train, tune, and visualize block-built networks from JSON
//! experiment configs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Visualization;

#[derive(Parser)]
#[command(name = "akid", version, about = "Block-built neural networks: train, tune, visualize")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Run every job in a hyperparameter sweep and print the report.
    Tune(TuneArgs),
    /// Render filters, activations, or the block graph from a checkpoint.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Where summaries and the final checkpoint go; overrides kid.log_dir.
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use only cached/offline data sources; never download.
    #[arg(long)]
    offline: bool,
    /// Config overrides, e.g. --kid.max_steps=10 --engine.num_towers=2.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TuneArgs {
    /// Tune spec (JSON): template, net_paras_list, opt_paras_list, num_slots.
    #[arg(long)]
    config: PathBuf,
    /// Run directory for report.json and per-job logs
    /// [default: results/tune-<timestamp>].
    #[arg(long)]
    log_dir: Option<PathBuf>,
    /// Use only cached/offline data sources; never download.
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct VisualizeArgs {
    /// Experiment config the checkpoint was trained from.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint file written by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// What to render.
    #[arg(long, value_enum)]
    what: Visualization,
    /// Output directory for the rendered files.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Use only cached/offline data sources; never download.
    #[arg(long)]
    offline: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(args) => commands::cmd_train(
            &args.config,
            args.log_dir.as_deref(),
            args.seed,
            args.offline,
            &args.overrides,
        ),
        Command::Tune(args) => {
            commands::cmd_tune(&args.config, args.log_dir.as_deref(), args.offline)
        }
        Command::Visualize(args) => commands::cmd_visualize(
            &args.config,
            &args.checkpoint,
            args.what,
            &args.out_dir,
            args.offline,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error:#}");
            ExitCode::FAILURE
        }
    }
}
