//! Run configuration: one JSON file, overridden field by field from the command line,
//! and snapshotted into the output directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use stratoseg::data::{PhantomSpec, PreprocessSpec, SamplingSpec};
use stratoseg::pipeline::BranchGenotypes;
use stratoseg::{Genotype, SearchSchedule, SlidingSpec, TrainingPlan};

pub const SCHEMA_VERSION: u32 = 1;
pub const SNAPSHOT_NAME: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Search,
    Train,
    Infer,
    Eval,
    Phantom,
}

/// Where one branch's architecture comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenotypeSource {
    /// A bundled architecture by name.
    Preset(String),
    /// A genotype file written by `search`.
    Searched(PathBuf),
    /// To be found by `search`.
    Search,
}

impl GenotypeSource {
    /// Parse a command-line value: `search`, a preset name, or a path.
    pub fn parse(s: &str) -> Self {
        if s == "search" {
            Self::Search
        } else if Genotype::preset(s).is_some() {
            Self::Preset(s.to_string())
        } else {
            Self::Searched(PathBuf::from(s))
        }
    }

    pub fn resolve(&self, branch: &str) -> Result<Genotype> {
        match self {
            Self::Preset(name) => Genotype::preset(name).with_context(|| {
                format!(
                    "{branch}: unknown preset {name:?} (known: {})",
                    Genotype::PRESETS.join(", ")
                )
            }),
            Self::Searched(path) => {
                let text =
                    std::fs::read_to_string(path).with_context(|| format!("{branch}: reading {}", path.display()))?;
                Ok(Genotype::from_json(&text)?)
            }
            Self::Search => bail!("{branch}: architecture has not been searched yet; run `search` first"),
        }
    }
}

/// Sources for the three searched branches; the detector uses the small-organ one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenotypeSources {
    pub anchor: GenotypeSource,
    pub mid: GenotypeSource,
    pub sh: GenotypeSource,
}

impl Default for GenotypeSources {
    fn default() -> Self {
        Self {
            anchor: GenotypeSource::Preset("paper-anchor".into()),
            mid: GenotypeSource::Preset("paper-mid".into()),
            sh: GenotypeSource::Preset("paper-sh".into()),
        }
    }
}

impl GenotypeSources {
    pub fn resolve(&self) -> Result<BranchGenotypes> {
        let sh = self.sh.resolve("sh")?;
        Ok(BranchGenotypes {
            anchor: self.anchor.resolve("anchor")?,
            mid: self.mid.resolve("mid")?,
            detector: sh.clone(),
            sh,
        })
    }

    pub fn to_search(&self) -> Vec<(&'static str, &GenotypeSource)> {
        [("anchor", &self.anchor), ("mid", &self.mid), ("sh", &self.sh)]
            .into_iter()
            .filter(|(_, s)| **s == GenotypeSource::Search)
            .collect()
    }
}

/// Synthetic data used when no data directory is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub count: usize,
    /// 32³ volumes instead of 64³.
    pub miniature: bool,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            count: 8,
            miniature: false,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self) -> PhantomSpec {
        if self.miniature {
            PhantomSpec::miniature()
        } else {
            PhantomSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: Option<RunMode>,
    /// Directory of `<case>_ct.nii.gz` / `<case>_label.nii.gz` pairs.
    pub data_dir: Option<PathBuf>,
    /// Organ catalog JSON; defaults to `catalog.json` in the data directory.
    pub catalog: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub width: f64,
    pub preprocess: PreprocessSpec,
    pub sampling: SamplingSpec,
    pub sliding: SlidingSpec,
    pub plan: TrainingPlan,
    pub search: SearchSchedule,
    pub augment: bool,
    pub sh_jitter_voxels: usize,
    pub genotypes: GenotypeSources,
    pub phantom: PhantomConfig,
    /// Checkpoint to resume training from, or to run inference with.
    pub checkpoint: Option<PathBuf>,
    /// Inference inputs; empty means every CT in the data directory.
    pub inputs: Vec<PathBuf>,
    pub overlays: bool,
    pub pred_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: None,
            data_dir: None,
            catalog: None,
            output_dir: PathBuf::from("runs/default"),
            seed: 0,
            workers: 0,
            width: 1.0,
            preprocess: PreprocessSpec::default(),
            sampling: SamplingSpec::default(),
            sliding: SlidingSpec::default(),
            plan: TrainingPlan::default(),
            search: SearchSchedule::default(),
            augment: true,
            sh_jitter_voxels: 2,
            genotypes: GenotypeSources::default(),
            phantom: PhantomConfig::default(),
            checkpoint: None,
            inputs: Vec::new(),
            overlays: false,
            pred_dir: None,
            gt_dir: None,
        }
    }
}

fn must_exist(what: &str, p: &Option<PathBuf>) -> Result<()> {
    if let Some(p) = p {
        ensure!(p.exists(), "{what} {} does not exist", p.display());
    }
    Ok(())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let raw: serde_json::Value =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        match raw.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => bail!(
                "{}: schema_version {v} is not supported (expected {SCHEMA_VERSION})",
                path.display()
            ),
            None => bail!("{}: missing schema_version", path.display()),
        }
        serde_json::from_value(raw).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Check the settings the given mode depends on.
    pub fn validate(&self, mode: RunMode) -> Result<()> {
        ensure!(
            self.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {}",
            self.schema_version
        );
        ensure!(self.width > 0.0, "width must be positive");
        self.preprocess.validate()?;
        self.sampling.validate()?;
        self.sliding.validate()?;
        must_exist("data directory", &self.data_dir)?;
        must_exist("catalog", &self.catalog)?;
        must_exist("checkpoint", &self.checkpoint)?;
        for p in &self.inputs {
            ensure!(p.exists(), "input {} does not exist", p.display());
        }
        for (name, src) in [
            ("anchor", &self.genotypes.anchor),
            ("mid", &self.genotypes.mid),
            ("sh", &self.genotypes.sh),
        ] {
            match src {
                GenotypeSource::Preset(p) => ensure!(Genotype::preset(p).is_some(), "{name}: unknown preset {p:?}"),
                GenotypeSource::Searched(p) if mode == RunMode::Train => {
                    ensure!(p.exists(), "{name}: genotype file {} does not exist", p.display())
                }
                _ => {}
            }
        }
        match mode {
            RunMode::Search => {
                self.search.validate()?;
                ensure!(
                    !self.genotypes.to_search().is_empty(),
                    "nothing to search: every branch has a preset or searched genotype"
                );
            }
            RunMode::Train => {
                self.plan.validate()?;
                self.genotypes.resolve()?;
            }
            RunMode::Infer => ensure!(self.checkpoint.is_some(), "inference needs a checkpoint"),
            RunMode::Eval => {
                ensure!(
                    self.pred_dir.is_some() && self.gt_dir.is_some(),
                    "evaluation needs --pred and --gt"
                );
                must_exist("prediction directory", &self.pred_dir)?;
                must_exist("ground-truth directory", &self.gt_dir)?;
            }
            RunMode::Phantom => ensure!(self.phantom.count > 0, "phantom count must be positive"),
        }
        Ok(())
    }

    /// Create the output directory and write the effective configuration into it.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.output_dir)
            .with_context(|| format!("creating output directory {}", self.output_dir.display()))?;
        let path = self.output_dir.join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_json()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn snapshot_reloads_equal() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            output_dir: dir.path().join("out"),
            seed: 17,
            genotypes: GenotypeSources {
                mid: GenotypeSource::Search,
                sh: GenotypeSource::Searched("g.json".into()),
                ..Default::default()
            },
            ..Default::default()
        };
        let path = cfg.write_snapshot().unwrap();
        assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schema_version": 1, "seed": 3, "plan": {"stage1_epochs": 4}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.plan.stage1_epochs, 4);
        assert_eq!(cfg.plan.stage2_epochs, TrainingPlan::default().stage2_epochs);
    }

    #[test]
    fn version_and_unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 3}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"schema_version": 2}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
        std::fs::write(&p, r#"{"schema_version": 1, "sed": 3}"#).unwrap();
        assert!(RunConfig::load(&p).is_err());
    }

    #[test]
    fn presets_only_is_nothing_to_search() {
        let err = RunConfig::default().validate(RunMode::Search).unwrap_err();
        assert!(err.to_string().contains("nothing to search"));
    }

    #[test]
    fn genotype_source_parsing() {
        assert_eq!(GenotypeSource::parse("search"), GenotypeSource::Search);
        assert_eq!(
            GenotypeSource::parse("paper-mid"),
            GenotypeSource::Preset("paper-mid".into())
        );
        assert_eq!(
            GenotypeSource::parse("x/g.json"),
            GenotypeSource::Searched("x/g.json".into())
        );
        let g = GenotypeSources::default().resolve().unwrap();
        assert_eq!(g, BranchGenotypes::presets());
    }
}
