//! `oceanmae`: data generation, pre-training, fine-tuning, evaluation and
//! embedding export.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use oceanmae::downstream::Task;
use oceanmae::strategies::StrategyKind;

#[derive(Debug, Parser)]
#[command(
    name = "oceanmae",
    version,
    about = "Ocean-aware masked autoencoder pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ocean-scene dataset.
    GenData(GenDataArgs),
    /// Pre-train the masked autoencoder.
    Pretrain(PretrainArgs),
    /// Train a UNet or Bathy-UNet under a transfer strategy.
    Finetune(FinetuneArgs),
    /// Evaluate a downstream checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Compute and store the embedding cache for a fixed strategy.
    Embed(EmbedArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StrategyArg {
    Random,
    Fe,
    Ff,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => StrategyKind::Random,
            StrategyArg::Fe => StrategyKind::Fe,
            StrategyArg::Ff => StrategyKind::Ff,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TaskArg {
    Seg,
    Bathy,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Seg => Task::Seg,
            TaskArg::Bathy => Task::Bathy,
        }
    }
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
}

#[derive(Debug, Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Train the plain-MAE ablation arm (no ocean descriptors).
    #[arg(long)]
    no_ocean: bool,
}

#[derive(Debug, Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-training checkpoint (fe/ff).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Encoder learning rate for ff.
    #[arg(long)]
    encoder_lr: Option<f64>,
    /// Patch size of the random encoder.
    #[arg(long)]
    patch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Downstream checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dump_predictions: bool,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-training checkpoint (fe).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    patch_size: Option<usize>,
}

fn base_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    if c.seed.is_some() {
        cfg.seed = c.seed;
    }
    if c.out.is_some() {
        cfg.out_dir = c.out.clone();
    }
    cfg.apply_seed();
    Ok(cfg)
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("OCEANMAE_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("OCEANMAE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::GenData(a) => {
            let mut cfg = base_config(&a.common)?;
            let g = &mut cfg.data.generate;
            set(&mut g.n_samples, a.n_samples);
            set(&mut g.image_size, a.image_size);
            set(&mut g.channels, a.channels);
            set(&mut g.n_classes, a.n_classes);
            commands::gen_data(cfg)
        }
        Command::Pretrain(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.data.dataset, a.data.map(Some));
            set(&mut cfg.pretrain.epochs, a.epochs);
            set(&mut cfg.pretrain.batch_size, a.batch_size);
            set(&mut cfg.model.patch_size, a.patch_size);
            if a.no_ocean {
                cfg.pretrain.no_ocean = true;
            }
            commands::pretrain(cfg)
        }
        Command::Finetune(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.data.dataset, a.data.map(Some));
            set(&mut cfg.strategy.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.strategy.kind, a.strategy.map(Into::into));
            set(&mut cfg.strategy.encoder_lr, a.encoder_lr.map(Some));
            set(&mut cfg.unet.task, a.task.map(Into::into));
            set(&mut cfg.finetune.epochs, a.epochs);
            set(&mut cfg.finetune.lr, a.lr);
            set(&mut cfg.model.patch_size, a.patch_size);
            commands::finetune(cfg)
        }
        Command::Evaluate(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.data.dataset, a.data.map(Some));
            set(&mut cfg.evaluate.checkpoint, a.checkpoint.map(Some));
            if a.dump_predictions {
                cfg.evaluate.dump_predictions = true;
            }
            commands::evaluate(cfg)
        }
        Command::Embed(a) => {
            let mut cfg = base_config(&a.common)?;
            set(&mut cfg.data.dataset, a.data.map(Some));
            set(&mut cfg.strategy.checkpoint, a.checkpoint.map(Some));
            set(&mut cfg.strategy.kind, a.strategy.map(Into::into));
            set(&mut cfg.model.patch_size, a.patch_size);
            commands::embed(cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
