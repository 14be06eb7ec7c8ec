pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use ppg_relcon::Error;

pub const OUT_ENV: &str = "RELCON_PPG_OUT";

#[derive(Debug, Parser)]
#[command(name = "ppg-relcon", version, about = "Motif-distance relative contrastive pre-training for PPG")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output root; also settable through RELCON_PPG_OUT.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dotted config override, e.g. `pipeline.stage2.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Single worker thread.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the motif distance (stage 1).
    PretrainDistance {
        #[arg(long)]
        resume: bool,
    },
    /// Train the encoder against the frozen distance (stage 2).
    PretrainEncoder {
        /// Distance checkpoint; defaults to the stage-1 best checkpoint.
        #[arg(long)]
        distance: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Embed every split with a trained encoder.
    Embed {
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Linear probe on saved embeddings.
    Probe {
        /// Directory holding train/val/test embeddings.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Fine-tune the encoder end to end with a task head.
    Finetune {
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Majority-class or train-mean baseline.
    Naive,
    /// Render metric reports side by side.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::PretrainDistance { .. } => "pretrain-distance",
            Command::PretrainEncoder { .. } => "pretrain-encoder",
            Command::Embed { .. } => "embed",
            Command::Probe { .. } => "probe",
            Command::Finetune { .. } => "finetune",
            Command::Naive => "naive",
            Command::Report { .. } => "report",
        }
    }
}

/// Exit code and category for a failure.
pub fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => (2, "config"),
        Some(Error::DataNotFound(_)) => (3, "data_not_found"),
        Some(Error::TrainingDiverged { .. }) => (4, "training_diverged"),
        Some(Error::InvalidArgument(_)) => (1, "invalid_argument"),
        Some(Error::InvalidTask(_)) => (1, "invalid_task"),
        Some(Error::Misuse(_)) => (1, "misuse"),
        Some(Error::Format(_)) => (1, "format"),
        Some(Error::Io(_)) => (1, "io"),
        Some(_) => (1, "error"),
        None => (1, "error"),
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let workers = if cli.deterministic { Some(1) } else { cli.workers };
    if let Some(n) = workers {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    if let Command::Report { reports } = &cli.command {
        return commands::report(reports);
    }
    let cfg = config::RunConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let ctx = commands::Ctx { cfg, out };
    ctx.snapshot(cli.command.name())?;
    match &cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::PretrainDistance { resume } => commands::pretrain_distance(&ctx, *resume),
        Command::PretrainEncoder { distance, resume } => commands::pretrain_encoder(&ctx, distance.as_deref(), *resume),
        Command::Embed { encoder } => commands::embed(&ctx, encoder.as_deref()),
        Command::Probe { embeddings } => commands::probe(&ctx, embeddings.as_deref()),
        Command::Finetune { encoder } => commands::finetune_cmd(&ctx, encoder.as_deref()),
        Command::Naive => commands::naive(&ctx),
        Command::Report { .. } => unreachable!("handled above"),
    }
}
