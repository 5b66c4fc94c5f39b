//! Command-line front end: dataset synthesis, staged training, inference
//! justification and evaluation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing upstream
//! checkpoint, 4 training divergence, 1 anything else.

use clap::{Parser, Subcommand};
use cxrjust_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

mod commands;

#[derive(Parser)]
#[command(
    name = "cxrjust",
    about = "2-class chest-image diagnosis with textual and counterfactual justification",
    version
)]
struct Cli {
    /// TOML configuration file (defaults applied for missing keys;
    /// CXRJUST_* environment variables override file values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override (highest precedence).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic phantom dataset on disk.
    Synth,
    /// Train one pipeline stage (upstream checkpoints must exist).
    Train {
        /// arae | gan1 | gan1-baseline | gan2 | invmap | refcnn
        stage: String,
    },
    /// Produce justification reports (JSON + PNGs) for the test split or a
    /// single image.
    Justify {
        /// Path to one PNG; when omitted the whole test split is processed.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Cap on the number of test images processed.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compute evaluation reports.
    Evaluate {
        /// wasserstein | alignment | captions | accuracy | saliency | all
        which: String,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let env: Vec<(String, String)> = std::env::vars().collect();
    let result = (|| -> cxrjust_core::Result<()> {
        let mut cfg = cxrjust_core::config::load_config(cli.config.as_deref(), &env)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &cli.out {
            cfg.out_dir = out.display().to_string();
        }
        match &cli.command {
            Command::Synth => commands::cmd_synth(&cfg),
            Command::Train { stage } => commands::cmd_train(&cfg, stage),
            Command::Justify { image, limit } => {
                commands::cmd_justify(&cfg, image.as_deref(), *limit)
            }
            Command::Evaluate { which } => commands::cmd_evaluate(&cfg, which),
        }
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::Corpus(_) => 2,
                Error::MissingDependency { .. } => 3,
                Error::TrainingDiverged(_) => 4,
                _ => 1,
            })
        }
    }
}
