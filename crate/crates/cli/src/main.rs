use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use dermclass_cli::commands;
use dermclass_cli::config::{Overrides, RunConfig};
use dermclass_cli::context::RunContext;
use dermclass_cli::error_line;

#[derive(Parser)]
#[command(name = "dermclass", version, about = "Dermatoscopic lesion classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding paths.output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed_split: Option<u64>,
    #[arg(long)]
    seed_augment: Option<u64>,
    #[arg(long)]
    seed_init: Option<u64>,
    /// Worker threads for per-sample parallelism.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, split and cap the manifest; write listings, weights and the image cache.
    Prepare(Common),
    /// Train from scratch with early stopping.
    Train(Common),
    /// Continue training from the best checkpoint.
    Resume {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a listing.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Listing CSV (image_id,label_code); defaults to the validation split.
        #[arg(long)]
        listing: Option<PathBuf>,
    },
    /// Write augmented copies of one image with their transform parameters.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image_id: String,
        #[arg(short = 'n', default_value_t = 8)]
        n: usize,
    },
    /// Generate the synthetic shape dataset at the configured paths.
    GenSynthetic(Common),
}

fn run(cli: Cli) -> Result<()> {
    let (common, name) = match &cli.command {
        Command::Prepare(c) => (c, "prepare"),
        Command::Train(c) => (c, "train"),
        Command::Resume { common, .. } => (common, "resume"),
        Command::Evaluate { common, .. } => (common, "evaluate"),
        Command::AugmentPreview { common, .. } => (common, "augment-preview"),
        Command::GenSynthetic(c) => (c, "gen-synthetic"),
    };
    if let Some(n) = common.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let overrides = Overrides {
        out: common.out.clone(),
        seed_split: common.seed_split,
        seed_augment: common.seed_augment,
        seed_init: common.seed_init,
    };
    let cfg = RunConfig::load(&common.config, &overrides)?;
    let mut ctx = RunContext::begin(&cfg.paths.output_dir, name)?;
    ctx.write("config.json", cfg.to_json())?;
    let result = match &cli.command {
        Command::Prepare(_) => commands::prepare(&cfg, &mut ctx),
        Command::Train(_) => commands::train(&cfg, &mut ctx),
        Command::Resume { checkpoint, .. } => commands::resume(&cfg, &mut ctx, checkpoint.as_deref()),
        Command::Evaluate { checkpoint, listing, .. } => {
            commands::evaluate_cmd(&cfg, &mut ctx, checkpoint.as_deref(), listing.as_deref())
        }
        Command::AugmentPreview { image_id, n, .. } => commands::augment_preview(&cfg, &mut ctx, image_id, *n),
        Command::GenSynthetic(_) => commands::gen_synthetic(&cfg, &mut ctx),
    };
    ctx.finish(&result)?;
    result
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
