use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stratoseg::checkpoint::{load_checkpoint, save_checkpoint};
use stratoseg::pipeline::{write_log_csv, TrainOptions, Trainer};
use stratoseg::seed::{derive, stream};
use stratoseg::{Pipeline, PipelineSpec};

use crate::cases::{data_dir, load_catalog, load_training_cases};
use crate::config::RunConfig;

pub const FINAL_CHECKPOINT: &str = "pipeline.ckpt";
pub const LOG_NAME: &str = "train_log.csv";

fn write_log(trainer: &Trainer, out: &Path) -> Result<()> {
    write_log_csv(&trainer.log, BufWriter::new(File::create(out.join(LOG_NAME))?))?;
    Ok(())
}

/// Stage-tagged checkpoints go to `checkpoints/`, the finished pipeline to `pipeline.ckpt`.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let dir = data_dir(cfg)?;
    let catalog = load_catalog(cfg, &dir)?;
    let cases = load_training_cases(&dir, &catalog, &cfg.preprocess)?;
    let mut trainer = match &cfg.checkpoint {
        Some(path) => {
            let t = load_checkpoint(path)
                .with_context(|| format!("loading {}", path.display()))?
                .into_trainer()?;
            log::info!("resuming at epoch {} from {}", t.epoch, path.display());
            t
        }
        None => {
            let spec = PipelineSpec {
                genotypes: cfg.genotypes.resolve()?,
                width: cfg.width,
                sliding: cfg.sliding,
                ..Default::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive(cfg.seed, stream::INIT));
            let pipeline = Pipeline::new(catalog, spec, &cfg.plan, &mut rng)?;
            let opts = TrainOptions {
                sampling: cfg.sampling.clone(),
                augment: cfg.augment,
                sh_jitter_voxels: cfg.sh_jitter_voxels,
                seed: cfg.seed,
            };
            Trainer::new(pipeline, cfg.plan.clone(), opts)?
        }
    };
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    trainer.run(&cases, |t| {
        let done = t.epoch - 1;
        let name = format!("stage{}_epoch{:03}.ckpt", t.plan.stage_of(done), done);
        save_checkpoint(t, &ckpt_dir.join(name))?;
        Ok(())
    })?;
    write_log(&trainer, &cfg.output_dir)?;
    save_checkpoint(&trainer, &cfg.output_dir.join(FINAL_CHECKPOINT))?;
    log::info!("training finished after {} epochs", trainer.epoch);
    Ok(())
}
