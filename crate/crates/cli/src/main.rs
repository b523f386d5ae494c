mod cases;
mod commands;
mod config;
mod overlay;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{GenotypeSource, RunConfig, RunMode};

/// Stratified organ-at-risk segmentation: phantom data, architecture search,
/// three-stage training, sliding-window inference and evaluation.
#[derive(Parser)]
#[command(name = "stratoseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,
    /// Channel-width multiplier for all networks.
    #[arg(long, global = true)]
    width: Option<f64>,
    /// Use 32³ phantoms when generating data.
    #[arg(long, global = true)]
    miniature: bool,
    /// Number of phantoms to generate when no data directory is given.
    #[arg(long, global = true)]
    phantoms: Option<usize>,
    /// Edge length of sampled training VOIs.
    #[arg(long, global = true)]
    voi: Option<usize>,
    #[arg(long, global = true)]
    negatives: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom data set.
    Phantom,
    /// Search per-branch architectures.
    Search(SearchArgs),
    /// Train the pipeline in three stages.
    Train(TrainArgs),
    /// Segment volumes with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted label maps against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenotypeArgs {
    /// `search`, a preset name, or a genotype file.
    #[arg(long)]
    anchor: Option<String>,
    #[arg(long)]
    mid: Option<String>,
    #[arg(long)]
    sh: Option<String>,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    genotypes: GenotypeArgs,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    joint_epochs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    genotypes: GenotypeArgs,
    /// Epochs per stage, e.g. `50,50,10`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    stages: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    no_augment: bool,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Write a PNG overlay of the middle axial slice per volume.
    #[arg(long)]
    overlays: bool,
    /// CT volumes; defaults to every `*_ct.nii.gz` in the data directory.
    inputs: Vec<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    gt: Option<PathBuf>,
}

fn apply_genotypes(cfg: &mut RunConfig, g: &GenotypeArgs) {
    let set = |slot: &mut GenotypeSource, v: &Option<String>| {
        if let Some(v) = v {
            *slot = GenotypeSource::parse(v);
        }
    };
    set(&mut cfg.genotypes.anchor, &g.anchor);
    set(&mut cfg.genotypes.mid, &g.mid);
    set(&mut cfg.genotypes.sh, &g.sh);
}

fn build_config(cli: &Cli) -> Result<(RunConfig, RunMode)> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $flag:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(cfg.output_dir, c.output);
    set!(cfg.seed, c.seed);
    set!(cfg.workers, c.workers);
    set!(cfg.width, c.width);
    set!(cfg.phantom.count, c.phantoms);
    set!(cfg.sampling.negatives_per_scan, c.negatives);
    if let Some(v) = c.voi {
        cfg.sampling.voi_size = [v; 3];
    }
    if c.data_dir.is_some() {
        cfg.data_dir = c.data_dir.clone();
    }
    if c.catalog.is_some() {
        cfg.catalog = c.catalog.clone();
    }
    cfg.phantom.miniature |= c.miniature;
    let mode = match &cli.command {
        Command::Phantom => RunMode::Phantom,
        Command::Search(a) => {
            apply_genotypes(&mut cfg, &a.genotypes);
            set!(cfg.search.warmup_epochs, a.warmup_epochs);
            set!(cfg.search.joint_epochs, a.joint_epochs);
            RunMode::Search
        }
        Command::Train(a) => {
            apply_genotypes(&mut cfg, &a.genotypes);
            if let Some(s) = &a.stages {
                cfg.plan.stage1_epochs = s[0];
                cfg.plan.stage2_epochs = s[1];
                cfg.plan.stage3_epochs = s[2];
            }
            set!(cfg.plan.batch_size, a.batch_size);
            cfg.augment &= !a.no_augment;
            if a.resume.is_some() {
                cfg.checkpoint = a.resume.clone();
            }
            RunMode::Train
        }
        Command::Infer(a) => {
            if a.checkpoint.is_some() {
                cfg.checkpoint = a.checkpoint.clone();
            }
            if !a.inputs.is_empty() {
                cfg.inputs = a.inputs.clone();
            }
            cfg.overlays |= a.overlays;
            RunMode::Infer
        }
        Command::Eval(a) => {
            if a.pred.is_some() {
                cfg.pred_dir = a.pred.clone();
            }
            if a.gt.is_some() {
                cfg.gt_dir = a.gt.clone();
            }
            RunMode::Eval
        }
    };
    cfg.mode = Some(mode);
    Ok((cfg, mode))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let (cfg, mode) = build_config(&cli)?;
    cfg.validate(mode)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .context("starting worker pool")?;
    }
    cfg.write_snapshot()?;
    match mode {
        RunMode::Phantom => commands::phantom(&cfg),
        RunMode::Search => commands::search(&cfg),
        RunMode::Train => commands::train(&cfg),
        RunMode::Infer => commands::infer(&cfg),
        RunMode::Eval => commands::eval(&cfg),
    }
}
