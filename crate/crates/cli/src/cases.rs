//! Case discovery and loading. A case `<name>` is the pair `<name>_ct.nii.gz` and
//! `<name>_label.nii.gz` in one directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use stratoseg::data::io::load_case;
use stratoseg::data::{generate_phantom, preprocess, save_labels, save_volume, PhantomSpec, PreprocessSpec};
use stratoseg::pipeline::TrainingCase;
use stratoseg::seed::{derive, stream};
use stratoseg::OarCatalog;

use crate::config::RunConfig;

pub const CT_SUFFIX: &str = "_ct.nii.gz";
pub const LABEL_SUFFIX: &str = "_label.nii.gz";
pub const CATALOG_NAME: &str = "catalog.json";
/// Overrides where generated phantom sets are kept between runs.
pub const CACHE_ENV: &str = "STRATOSEG_CACHE_DIR";

pub fn ct_path(dir: &Path, case: &str) -> PathBuf {
    dir.join(format!("{case}{CT_SUFFIX}"))
}

pub fn label_path(dir: &Path, case: &str) -> PathBuf {
    dir.join(format!("{case}{LABEL_SUFFIX}"))
}

/// Case names in `dir` having a file with the given suffix, sorted.
pub fn names_with_suffix(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(case) = name.strip_suffix(suffix) {
            out.push(case.to_string());
        }
    }
    out.sort();
    Ok(out)
}

/// Write `count` phantoms and their catalog into `dir`; returns the case names.
pub fn write_phantoms(dir: &Path, spec: &PhantomSpec, count: usize, seed: u64) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    spec.catalog().save(&dir.join(CATALOG_NAME))?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let case = format!("phantom_{i:03}");
            let p = generate_phantom(spec, derive(seed, stream::PHANTOM + i as u64))?;
            save_volume(&p.volume, &ct_path(dir, &case))?;
            save_labels(&p.labels, &label_path(dir, &case))?;
            Ok(case)
        })
        .collect()
}

/// The configured data directory, or a cached phantom set generated on first use.
pub fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if let Some(d) = &cfg.data_dir {
        return Ok(d.clone());
    }
    let root = std::env::var_os(CACHE_ENV).map_or_else(|| cfg.output_dir.join("phantoms"), PathBuf::from);
    let kind = if cfg.phantom.miniature { "mini" } else { "std" };
    let dir = root.join(format!("phantom-{kind}-seed{}-n{}", cfg.seed, cfg.phantom.count));
    if dir.join(CATALOG_NAME).exists() {
        log::info!("using cached phantoms in {}", dir.display());
    } else {
        log::info!("generating {} phantoms in {}", cfg.phantom.count, dir.display());
        write_phantoms(&dir, &cfg.phantom.spec(), cfg.phantom.count, cfg.seed)?;
    }
    Ok(dir)
}

pub fn load_catalog(cfg: &RunConfig, data_dir: &Path) -> Result<OarCatalog> {
    let path = cfg.catalog.clone().unwrap_or_else(|| data_dir.join(CATALOG_NAME));
    OarCatalog::load(&path).with_context(|| format!("loading catalog {}", path.display()))
}

/// Every labeled case in `dir`, preprocessed.
pub fn load_training_cases(dir: &Path, catalog: &OarCatalog, pre: &PreprocessSpec) -> Result<Vec<TrainingCase>> {
    let names = names_with_suffix(dir, CT_SUFFIX)?;
    let cases: Vec<TrainingCase> = names
        .par_iter()
        .filter(|c| label_path(dir, c).exists())
        .map(|c| {
            let (vol, labels) = load_case(&ct_path(dir, c), Some(&label_path(dir, c)), Some(catalog))
                .with_context(|| format!("loading case {c}"))?;
            Ok(TrainingCase {
                volume: preprocess(&vol, pre),
                labels: labels.expect("label path given"),
            })
        })
        .collect::<Result<_>>()?;
    if cases.is_empty() {
        bail!(
            "no labeled cases (*{CT_SUFFIX} with *{LABEL_SUFFIX}) in {}",
            dir.display()
        );
    }
    log::info!("loaded {} cases from {}", cases.len(), dir.display());
    Ok(cases)
}

/// Pair up prediction and ground-truth label files by case name.
pub struct Matching {
    pub pairs: Vec<String>,
    /// Case name and reason.
    pub skipped: Vec<(String, String)>,
}

pub fn match_labels(pred_dir: &Path, gt_dir: &Path) -> Result<Matching> {
    let mut seen: BTreeMap<String, (bool, bool)> = BTreeMap::new();
    for c in names_with_suffix(pred_dir, LABEL_SUFFIX)? {
        seen.entry(c).or_default().0 = true;
    }
    for c in names_with_suffix(gt_dir, LABEL_SUFFIX)? {
        seen.entry(c).or_default().1 = true;
    }
    let mut m = Matching {
        pairs: Vec::new(),
        skipped: Vec::new(),
    };
    for (case, flags) in seen {
        match flags {
            (true, true) => m.pairs.push(case),
            (true, false) => m.skipped.push((case, "no ground truth".into())),
            _ => m.skipped.push((case, "no prediction".into())),
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_lists_unpaired_cases() {
        let (p, g) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for c in ["a", "b"] {
            std::fs::write(label_path(p.path(), c), b"").unwrap();
        }
        for c in ["b", "c"] {
            std::fs::write(label_path(g.path(), c), b"").unwrap();
        }
        std::fs::write(g.path().join("notes.txt"), b"").unwrap();
        let m = match_labels(p.path(), g.path()).unwrap();
        assert_eq!(m.pairs, vec!["b"]);
        assert_eq!(
            m.skipped,
            vec![
                ("a".to_string(), "no ground truth".to_string()),
                ("c".to_string(), "no prediction".to_string())
            ]
        );
    }
}
