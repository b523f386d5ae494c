use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rayon::prelude::*;

use stratoseg::checkpoint::load_checkpoint;
use stratoseg::data::{load_volume, preprocess, save_labels};

use crate::cases::{ct_path, data_dir, label_path, names_with_suffix, CT_SUFFIX};
use crate::config::RunConfig;
use crate::overlay::write_overlay;

pub const RUNTIME_LOG: &str = "runtime.csv";

fn case_name(p: &Path) -> String {
    let f = p
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    f.strip_suffix(CT_SUFFIX)
        .or_else(|| f.strip_suffix(".nii.gz"))
        .or_else(|| f.strip_suffix(".nii"))
        .unwrap_or(&f)
        .to_string()
}

/// Writes `<case>_label.nii.gz` per input, optional overlays, and per-volume runtimes.
pub fn infer(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.checkpoint.as_ref().expect("validated");
    let pipeline = load_checkpoint(ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?
        .pipeline;
    let inputs: Vec<PathBuf> = if cfg.inputs.is_empty() {
        let dir = data_dir(cfg)?;
        names_with_suffix(&dir, CT_SUFFIX)?
            .iter()
            .map(|c| ct_path(&dir, c))
            .collect()
    } else {
        cfg.inputs.clone()
    };
    anyhow::ensure!(!inputs.is_empty(), "no input volumes");
    let runtimes: Vec<(String, f64)> = inputs
        .par_iter()
        .map(|path| {
            let case = case_name(path);
            let raw = load_volume(path).with_context(|| format!("loading {}", path.display()))?;
            let x = preprocess(&raw, &cfg.preprocess);
            let started = Instant::now();
            let out = pipeline.infer(&x)?;
            let secs = started.elapsed().as_secs_f64();
            log::info!("{case}: {secs:.2}s, {} small-organ detections", out.detections.len());
            save_labels(&out.labels, &label_path(&cfg.output_dir, &case))?;
            if cfg.overlays {
                write_overlay(&x, &out.labels, &cfg.output_dir.join(format!("{case}_overlay.png")))?;
            }
            Ok((case, secs))
        })
        .collect::<Result<_>>()?;
    let mut log = String::from("case,seconds\n");
    for (case, secs) in &runtimes {
        log.push_str(&format!("{case},{secs:.3}\n"));
    }
    std::fs::write(cfg.output_dir.join(RUNTIME_LOG), log)?;
    Ok(())
}
