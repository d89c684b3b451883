//! `tgat`: synthesize, preprocess, train, evaluate and gradient-check.
//!
//! Exit codes: 0 success, 1 failed gradient check, 2 configuration,
//! 3 I/O, 4 data validation, 5 numerical failure.

mod archive;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use eeg_tgat::model::Ablation;
use eeg_tgat::synth::SynthConfig;
use eeg_tgat::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "tgat", version, about = "EEG segment classification with temporal graph attention")]
struct Cli {
    /// Run configuration (JSON); defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `train.max_epochs=20`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Base directory for run directories (overrides `paths.output`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// `separable` or `temporal`.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Filter, epoch and segment recordings into a segment archive.
    Preprocess {
        /// Directory of recordings.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Cross-validate on a segment archive.
    Train {
        /// Segment archive directory.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `none`, `no-tdrop`, `no-tattn`, `no-both`, or `all` for every arm.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score a checkpoint on a segment archive.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Segment archive directory.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `splits.json` of the training run; restricts to the checkpoint's
        /// test fold.
        #[arg(long)]
        split: Option<PathBuf>,
    },
    /// Finite-difference check of every op and parameter group.
    Gradcheck {
        /// Random inputs per op.
        #[arg(long, default_value_t = 3)]
        draws: u64,
        /// Sampled coordinates per parameter group.
        #[arg(long, default_value_t = 8)]
        per_group: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Param(_) | Error::Split(_) | Error::Layout(_) | Error::Design(_) => 2,
                Error::Io { .. } => 3,
                Error::Diverged { .. } | Error::Numeric(_) | Error::Optimizer { .. } => 5,
                Error::Format { .. }
                | Error::Length(_)
                | Error::Shape(_)
                | Error::Index(_)
                | Error::Contract(_)
                | Error::Statistics(_) => 4,
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let preset = match &cli.command {
        Command::Synth { preset: Some(name) } => Some(
            SynthConfig::preset(name).ok_or_else(|| Error::Config(format!("unknown synth preset `{name}`")))?,
        ),
        _ => None,
    };
    let mut sets = cli.sets.clone();
    let mut all_arms = false;
    if let Command::Train { ablation: Some(arm), .. } = &cli.command {
        if arm == "all" {
            all_arms = true;
        } else if Ablation::parse(arm).is_some() {
            sets.push(format!("ablation={arm}"));
        } else {
            return Err(Error::Config(format!("unknown ablation arm `{arm}`")).into());
        }
    }
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), preset, &sets)?;
    if let Some(out) = cli.out {
        cfg.paths.output = out;
    }
    match &cli.command {
        Command::Preprocess { input: Some(p) } | Command::Train { input: Some(p), .. } | Command::Evaluate { input: Some(p), .. } => {
            cfg.paths.input = Some(p.clone())
        }
        _ => {}
    }
    match cli.command {
        Command::Synth { .. } => commands::synth(&cfg),
        Command::Preprocess { .. } => commands::preprocess(&cfg),
        Command::Train { .. } => commands::train(&cfg, all_arms),
        Command::Evaluate { checkpoint, split, .. } => {
            let paired = cli.config.is_some() || !cli.sets.is_empty();
            commands::evaluate_cmd(&cfg, &checkpoint, split.as_deref(), paired)
        }
        Command::Gradcheck { draws, per_group, inject_fault } => {
            commands::gradcheck(&cfg, draws, per_group, inject_fault.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
