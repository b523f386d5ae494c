use std::fs::File;
use std::io::BufWriter;

use anyhow::{ensure, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stratoseg::nas::{run_search, write_alpha_csv, SearchState};
use stratoseg::pipeline::{search_samples, Branch, BranchConfig};
use stratoseg::seed::{derive, stream};
use stratoseg::{BranchRole, Pipeline, PipelineSpec};

use crate::cases::{data_dir, load_catalog, load_training_cases};
use crate::config::RunConfig;

fn role_of(name: &str) -> BranchRole {
    match name {
        "anchor" => BranchRole::Anchor,
        "mid" => BranchRole::Mid,
        _ => BranchRole::ShSeg,
    }
}

/// Writes `genotype_<branch>.json` and `alphas_<branch>.csv` per searched branch.
pub fn search(cfg: &RunConfig) -> Result<()> {
    let dir = data_dir(cfg)?;
    let catalog = load_catalog(cfg, &dir)?;
    let cases = load_training_cases(&dir, &catalog, &cfg.preprocess)?;
    let spec = PipelineSpec {
        width: cfg.width,
        sliding: cfg.sliding,
        ..Default::default()
    };
    // only used for sample geometry; its weights are never trained
    let reference = Pipeline::new(catalog.clone(), spec, &cfg.plan, &mut ChaCha8Rng::seed_from_u64(0))?;
    let schedule = &cfg.search;
    for (i, (name, _)) in cfg.genotypes.to_search().into_iter().enumerate() {
        let role = role_of(name);
        let lr = match role {
            BranchRole::ShSeg => schedule.lr_sh,
            _ => schedule.lr_anchor_mid,
        };
        let stream_seed = derive(cfg.seed, stream::SEARCH + i as u64);
        let samples = search_samples(&reference, role, &cases, &cfg.sampling, stream_seed)?;
        let (n_train, n_val) = schedule.split(samples.len());
        ensure!(
            n_train > 0 && n_val > 0,
            "{name}: {} samples cannot be split for search",
            samples.len()
        );
        let (train, val) = samples.split_at(n_train);
        let branch_cfg = BranchConfig::new(role, &catalog, None, cfg.width, lr)?;
        let loss = branch_cfg.loss;
        let net = Branch::new(
            branch_cfg,
            &mut ChaCha8Rng::seed_from_u64(derive(stream_seed, stream::INIT)),
        )?
        .net;
        let mut state = SearchState::new(net, loss, cfg.plan.optimizer, lr)?;
        log::info!(
            "searching {name}: {} training / {} validation samples, {} epochs",
            train.len(),
            val.len(),
            schedule.total_epochs()
        );
        let outcome = run_search(
            &mut state,
            train,
            val,
            schedule,
            &mut ChaCha8Rng::seed_from_u64(stream_seed),
        )?;
        log::info!("{name}: {}", outcome.genotype);
        let gpath = cfg.output_dir.join(format!("genotype_{name}.json"));
        std::fs::write(&gpath, outcome.genotype.to_json()).with_context(|| format!("writing {}", gpath.display()))?;
        let apath = cfg.output_dir.join(format!("alphas_{name}.csv"));
        write_alpha_csv(&outcome.alpha_log, BufWriter::new(File::create(&apath)?))?;
    }
    Ok(())
}
