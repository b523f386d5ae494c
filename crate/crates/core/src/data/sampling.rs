use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{LabelMap, Voi, Volume};
use crate::nn::resample::{resize_linear, resize_nearest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSpec {
    pub voi_size: [usize; 3],
    pub negatives_per_scan: usize,
    pub positive_per_organ: usize,
    pub scale_range: [f64; 2],
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            voi_size: [128, 128, 64],
            negatives_per_scan: 15,
            positive_per_organ: 1,
            scale_range: [0.8, 1.2],
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.voi_size.contains(&0) || self.positive_per_organ == 0 {
            return config_err("VOI size and positives per organ must be positive");
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return config_err(format!("scale range [{lo}, {hi}] must be positive and contain 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleKind {
    Positive(u16),
    Negative,
}

/// Training VOIs for one scan: `positive_per_organ` VOIs centred on random voxels
/// of each organ present, then `negatives_per_scan` VOIs at uniform origins.
/// VOIs larger than the scan are clamped to it.
pub fn sample_vois(labels: &LabelMap, spec: &SamplingSpec, seed: u64) -> Result<Vec<(Voi, SampleKind)>> {
    spec.validate()?;
    let shape = labels.shape();
    let size = [0, 1, 2].map(|a| spec.voi_size[a].min(shape[a]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<[usize; 3]>> = vec![Vec::new(); labels.class_count as usize + 1];
    for ((x, y, z), &v) in labels.data.indexed_iter() {
        if v > 0 {
            members[v as usize].push([x, y, z]);
        }
    }
    let mut out = Vec::new();
    for organ in 1..=labels.class_count {
        let voxels = &members[organ as usize];
        if voxels.is_empty() {
            log::warn!("organ {organ} is absent from the scan; no positive VOIs");
            continue;
        }
        for _ in 0..spec.positive_per_organ {
            let c = voxels[rng.gen_range(0..voxels.len())];
            let start = [0, 1, 2].map(|a| {
                let s = c[a] as i64 - size[a] as i64 / 2;
                s.clamp(0, (shape[a] - size[a]) as i64) as usize
            });
            out.push((Voi::new(start, size, shape)?, SampleKind::Positive(organ)));
        }
    }
    for _ in 0..spec.negatives_per_scan {
        let start = [0, 1, 2].map(|a| rng.gen_range(0..=shape[a] - size[a]));
        out.push((Voi::new(start, size, shape)?, SampleKind::Negative));
    }
    Ok(out)
}

/// Rescale a scan and its labels by `factor` (linear for intensities, nearest for
/// labels). Spacing changes so the physical extent stays the same.
pub fn augment_scale(vol: &Volume, labels: &LabelMap, factor: f64, spec: &SamplingSpec) -> Result<(Volume, LabelMap)> {
    let [lo, hi] = spec.scale_range;
    if !(factor >= lo && factor <= hi) {
        return Err(Error::InvalidValue(format!(
            "scale factor {factor} outside [{lo}, {hi}]"
        )));
    }
    if vol.shape() != labels.shape() {
        return Err(Error::Shape(format!(
            "volume {:?} and labels {:?} differ",
            vol.shape(),
            labels.shape()
        )));
    }
    let src = vol.shape();
    let dst = src.map(|n| ((n as f64 * factor).round() as usize).max(1));
    let spacing = [0, 1, 2].map(|a| vol.spacing[a] * src[a] as f64 / dst[a] as f64);
    let shape = (dst[0], dst[1], dst[2]);
    let iv = resize_linear(vol.data.as_standard_layout().as_slice().expect("contiguous"), src, dst);
    let lv = resize_nearest(
        labels.data.as_standard_layout().as_slice().expect("contiguous"),
        src,
        dst,
    );
    Ok((
        Volume::new(
            ndarray::Array3::from_shape_vec(shape, iv).expect("sized"),
            spacing,
            vol.origin,
        )?,
        LabelMap::new(
            ndarray::Array3::from_shape_vec(shape, lv).expect("sized"),
            labels.class_count,
            spacing,
            labels.origin,
        )?,
    ))
}

/// Scale augmentation with a factor drawn uniformly from the configured range.
pub fn augment_random(vol: &Volume, labels: &LabelMap, spec: &SamplingSpec, seed: u64) -> Result<(Volume, LabelMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = spec.scale_range;
    let f = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    augment_scale(vol, labels, f, spec)
}
