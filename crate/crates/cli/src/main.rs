use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use livecheck_core::cli::{self, TrainOptions};
use livecheck_core::modelsel;

/// Software fingerprint liveness detection.
#[derive(Parser)]
#[command(name = "livecheck", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; runs the grid search first if the config lists several candidates.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Skip unreadable images instead of failing.
        #[arg(long)]
        skip_unreadable: bool,
    },
    /// Cross-validate every candidate, write the report, and train the best.
    Gridsearch {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_unreadable: bool,
    },
    /// Print `path score label` for each image.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Process images sequentially and print per-image latency to stderr.
        #[arg(long)]
        timing: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Print FPR, FNR and ACE on a labeled dataset.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic live/fake texture dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn train_options(skip_unreadable: bool) -> TrainOptions {
    TrainOptions {
        cache_dir: modelsel::cache_dir_from_env(),
        skip_unreadable,
    }
}

fn run(args: Args) -> Result<()> {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    let mut out = stdout.lock();
    let mut err = stderr.lock();
    match args.command {
        Command::Train {
            config,
            data,
            out: model,
            skip_unreadable,
        } => {
            cli::cmd_train(
                &config,
                &data,
                &model,
                &train_options(skip_unreadable),
                &mut out,
                &mut err,
            )
            .context("training failed")?;
        }
        Command::Gridsearch {
            config,
            data,
            report,
            out: model,
            skip_unreadable,
        } => {
            cli::cmd_gridsearch(
                &config,
                &data,
                &report,
                &model,
                &train_options(skip_unreadable),
                &mut out,
                &mut err,
            )
            .context("grid search failed")?;
        }
        Command::Predict {
            model,
            timing,
            images,
        } => {
            let summary = cli::cmd_predict(&model, &images, timing, &mut out, &mut err)?;
            if summary.failures > 0 {
                out.flush()?;
                bail!("{} of {} images failed", summary.failures, images.len());
            }
        }
        Command::Evaluate { model, data } => {
            cli::cmd_evaluate(&model, &data, &mut out).context("evaluation failed")?;
        }
        Command::Synth {
            out: root,
            per_class,
            size,
            seed,
        } => {
            let n = cli::cmd_synth(&root, per_class, size, seed)?;
            writeln!(out, "wrote {n} images to {}", root.display())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
