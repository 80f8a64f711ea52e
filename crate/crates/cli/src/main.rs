use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tempose_cli::commands::{self, EnvOpts};

/// Temporal 6D object-pose estimation: data generation, training,
/// evaluation, and reporting.
#[derive(Parser)]
#[command(name = "tempose", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic video-pose corpus with precomputed features.
    #[command(name = "synth-gen")]
    SynthGen {
        /// TOML config with a [synth] section.
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed for all randomness (required with TEMPOSE_STRICT=1).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated corpus.
    Train {
        /// TOML config with [model] and [train] sections (not needed when
        /// resuming).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus directory written by synth-gen.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        /// Seed for all randomness (required with TEMPOSE_STRICT=1).
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: records, per-object report, accuracy curves.
    Eval {
        /// Model or training checkpoint (.vpck).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Context length(s) in frames; repeat to sweep (e.g. 2 5 7 10).
        #[arg(long = "context-len", num_args = 1..)]
        context_len: Vec<usize>,
        /// Also emit SVG curve plots.
        #[arg(long)]
        svg: bool,
    },
    /// Merge records files into one per-object report.
    Report {
        /// One or more records JSON-lines files from eval.
        #[arg(long, num_args = 1..)]
        records: Vec<PathBuf>,
        /// Object-model registry (models/registry.jsonl).
        #[arg(long)]
        models: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Also emit SVG curve plots.
        #[arg(long)]
        svg: bool,
    },
}

fn run() -> tempose_core::Result<()> {
    let cli = Cli::parse();
    let env = EnvOpts::from_env()?;
    match cli.command {
        Command::SynthGen { config, out, seed } => {
            std::fs::create_dir_all(&out)?;
            commands::synth_gen(&config, &out, seed, &env)?;
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            std::fs::create_dir_all(&out)?;
            commands::train_cmd(config.as_deref(), &data, &out, seed, resume.as_deref(), &env)?;
        }
        Command::Eval {
            checkpoint,
            data,
            out,
            context_len,
            svg,
        } => {
            commands::eval_cmd(&checkpoint, &data, &out, &context_len, svg, &env)?;
        }
        Command::Report {
            records,
            models,
            out,
            svg,
        } => {
            commands::report_cmd(&records, &models, &out, svg, &env)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
