//! `mtuda` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage/validation/configuration error, 2 runtime
//! failure.

mod commands;
mod plot;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(
    name = "mtuda",
    about = "Cross-modality segmentation adaptation under source-label scarcity",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic two-modality benchmark dataset.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides every stage seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Ingest raw volumes (.mtvl) into the dataset container.
    Ingest {
        /// Directory of .mtvl volume files.
        #[arg(long)]
        volumes: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Crop window size around the foreground centroid.
        #[arg(long, default_value_t = 256)]
        roi: usize,
        /// Modality tag for the ingested volumes: a (source) or b (target).
        #[arg(long, default_value = "a")]
        domain: String,
        /// Split assigned to the ingested volumes.
        #[arg(long, default_value = "train")]
        split: String,
        /// Strip labels from the emitted records even when present.
        #[arg(long, default_value_t = false)]
        withhold_labels: bool,
    },
    /// Train the dual cycle alignment module.
    TrainDcam {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (from `synth` or `ingest`).
        #[arg(long)]
        data: PathBuf,
        /// Output checkpoint file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Optional line-delimited loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Translate a dataset through a trained generator.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        /// s2t or t2s.
        #[arg(long)]
        direction: String,
        #[arg(long = "in", value_name = "DIR")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual-teacher student.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frozen DCAM checkpoint.
        #[arg(long)]
        dcam: PathBuf,
        /// Run directory (resolved config, metrics log, checkpoints).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Ablation preset: full, ns, nt, ns-mse, supervised.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Evaluate a trained student on the held-out target test set.
    Eval {
        /// Run directory (uses checkpoints/final.ckpt) or a checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report path; defaults to report.json beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// DCAM checkpoint used to translate target images before
        /// segmentation. Omit to segment raw target images.
        #[arg(long)]
        dcam: Option<PathBuf>,
        /// Sentinel ASD for degenerate masks.
        #[arg(long, default_value_t = 100.0)]
        asd_cap: f64,
    },
    /// Render loss curves and per-class Dice bars to PNG files.
    Plot {
        /// metrics.ndjson from a training run.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Repeatable `label=report.json` entries for the Dice bars.
        #[arg(long)]
        report: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprint!("{e}");
            std::process::exit(1);
        }
    };
    let result = match cli.command {
        Command::Synth { config, out, seed } => commands::synth(&config, &out, seed),
        Command::Ingest {
            volumes,
            out,
            roi,
            domain,
            split,
            withhold_labels,
        } => commands::ingest(&volumes, &out, roi, &domain, &split, withhold_labels),
        Command::TrainDcam {
            config,
            data,
            out,
            seed,
            log,
        } => commands::train_dcam(&config, &data, &out, seed, log.as_deref()),
        Command::Translate {
            ckpt,
            direction,
            input,
            out,
        } => commands::translate(&ckpt, &direction, &input, &out),
        Command::Train {
            config,
            data,
            dcam,
            out,
            seed,
            ablation,
        } => commands::train(&config, &data, &dcam, &out, seed, ablation.as_deref()),
        Command::Eval {
            ckpt,
            data,
            out,
            dcam,
            asd_cap,
        } => commands::eval(&ckpt, &data, out.as_deref(), dcam.as_deref(), asd_cap),
        Command::Plot {
            metrics,
            report,
            out,
        } => commands::plot(metrics.as_deref(), &report, &out),
    };
    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_usage() { 1 } else { 2 });
        }
    }
}
