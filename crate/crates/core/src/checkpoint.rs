//! Checkpoints: a little-endian binary file of named numeric sections plus a JSON
//! sidecar (`<file>.json`) with everything needed to rebuild the pipeline.
//!
//! Binary layout: magic `STSGCKPT`, `u32` format version, `u32` section count, then
//! per section a `u16` name length, the UTF-8 name, a `u8` type tag (0 = f32,
//! 1 = f64), a `u64` element count and the elements.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::OarCatalog;
use crate::nn::{OptimizerState, Parameterized};
use crate::pipeline::{BranchRole, LogRow, Pipeline, PipelineSpec, TrainOptions, Trainer, TrainerState, TrainingPlan};

const MAGIC: &[u8; 8] = b"STSGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum SectionData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl SectionData {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub data: SectionData,
}

pub fn write_sections(sections: &[Section], mut out: impl Write) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(sections.len() as u32).to_le_bytes())?;
    for s in sections {
        let name = s.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("section name too long: {}", s.name)))?;
        out.write_all(&len.to_le_bytes())?;
        out.write_all(name)?;
        match &s.data {
            SectionData::F32(v) => {
                out.write_all(&[0])?;
                out.write_all(&(v.len() as u64).to_le_bytes())?;
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
            SectionData::F64(v) => {
                out.write_all(&[1])?;
                out.write_all(&(v.len() as u64).to_le_bytes())?;
                for x in v {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_sections(mut r: impl Read) -> Result<Vec<Section>> {
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let tag = read_exact::<1>(&mut r)?[0];
        let len = u64::from_le_bytes(read_exact(&mut r)?) as usize;
        let data = match tag {
            0 => {
                let mut buf = vec![0u8; len * 4];
                r.read_exact(&mut buf)?;
                SectionData::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let mut buf = vec![0u8; len * 8];
                r.read_exact(&mut buf)?;
                SectionData::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            t => return Err(Error::Format(format!("unknown section type {t} in {name}"))),
        };
        out.push(Section { name, data });
    }
    Ok(out)
}

/// Sidecar contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    /// Next epoch to run (equals the number of completed epochs).
    pub epoch: usize,
    pub stage: u8,
    pub catalog: OarCatalog,
    pub pipeline: PipelineSpec,
    pub plan: TrainingPlan,
    pub options: TrainOptions,
    /// Optimizer step count and per-parameter moment lengths, by branch.
    pub optimizer_steps: Vec<u64>,
    pub moment_lengths: Vec<Vec<usize>>,
    pub log: Vec<LogRow>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Save the trainer's pipeline weights, optimizer moments and progress.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut p = trainer.pipeline.clone();
    let state = trainer.state();
    let mut sections = Vec::new();
    for (role, opt) in BranchRole::ALL.iter().zip(&state.optimizers) {
        sections.push(Section {
            name: format!("net.{}", role.name()),
            data: SectionData::F32(p.branch_mut(*role).net.state_vector()),
        });
        sections.push(Section {
            name: format!("opt.{}.first", role.name()),
            data: SectionData::F64(opt.first.concat()),
        });
        sections.push(Section {
            name: format!("opt.{}.second", role.name()),
            data: SectionData::F64(opt.second.concat()),
        });
    }
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        epoch: state.epoch,
        stage: trainer.plan.stage_of(state.epoch.saturating_sub(1)),
        catalog: p.catalog.clone(),
        pipeline: p.spec.clone(),
        plan: trainer.plan.clone(),
        options: trainer.opts.clone(),
        optimizer_steps: state.optimizers.iter().map(|o| o.step).collect(),
        moment_lengths: state
            .optimizers
            .iter()
            .map(|o| o.first.iter().map(Vec::len).collect())
            .collect(),
        log: state.log,
    };
    let f = std::fs::File::create(path)?;
    write_sections(&sections, std::io::BufWriter::new(f))?;
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn split(flat: &[f64], lengths: &[usize]) -> Result<Vec<Vec<f64>>> {
    if flat.len() != lengths.iter().sum::<usize>() {
        return Err(Error::Format(
            "optimizer moments do not match their recorded lengths".into(),
        ));
    }
    let mut off = 0;
    Ok(lengths
        .iter()
        .map(|&n| {
            let v = flat[off..off + n].to_vec();
            off += n;
            v
        })
        .collect())
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub pipeline: Pipeline,
    pub state: TrainerState,
}

impl LoadedCheckpoint {
    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::resume(self.pipeline, self.meta.plan, self.meta.options, self.state)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let meta: CheckpointMeta = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format {} is not supported",
            meta.format_version
        )));
    }
    let sections = read_sections(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let find = |name: &str| {
        sections
            .iter()
            .find(|s| s.name == name)
            .map(|s| &s.data)
            .ok_or_else(|| Error::Format(format!("checkpoint has no section {name}")))
    };
    // weights are overwritten below, so the initialization seed is irrelevant
    let mut pipeline = Pipeline::new(
        meta.catalog.clone(),
        meta.pipeline.clone(),
        &meta.plan,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let mut optimizers = Vec::new();
    for (i, role) in BranchRole::ALL.iter().enumerate() {
        match find(&format!("net.{}", role.name()))? {
            SectionData::F32(v) => pipeline.branch_mut(*role).net.load_state_vector(v)?,
            _ => return Err(Error::Format("network weights must be f32".into())),
        }
        let moments = |kind: &str| -> Result<Vec<Vec<f64>>> {
            match find(&format!("opt.{}.{kind}", role.name()))? {
                SectionData::F64(v) if v.is_empty() => Ok(Vec::new()),
                SectionData::F64(v) => split(v, &meta.moment_lengths[i]),
                _ => Err(Error::Format("optimizer moments must be f64".into())),
            }
        };
        optimizers.push(OptimizerState {
            step: meta.optimizer_steps[i],
            first: moments("first")?,
            second: moments("second")?,
        });
    }
    let state = TrainerState {
        epoch: meta.epoch,
        optimizers,
        log: meta.log.clone(),
    };
    Ok(LoadedCheckpoint { meta, pipeline, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_round_trip() {
        let s = vec![
            Section {
                name: "a".into(),
                data: SectionData::F32(vec![1.5, -0.0, f32::MAX]),
            },
            Section {
                name: "bb".into(),
                data: SectionData::F64(vec![]),
            },
            Section {
                name: "c".into(),
                data: SectionData::F64(vec![1e-300, 2.0]),
            },
        ];
        let mut buf = Vec::new();
        write_sections(&s, &mut buf).unwrap();
        assert_eq!(read_sections(&buf[..]).unwrap(), s);
        buf[0] = b'X';
        assert!(matches!(read_sections(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_version_rejected() {
        let mut buf = Vec::new();
        write_sections(&[], &mut buf).unwrap();
        buf[8] = 9;
        assert!(matches!(read_sections(&buf[..]), Err(Error::Format(_))));
    }
}
