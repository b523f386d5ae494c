//! Ingestion, intensity windowing, VOI sampling, augmentation, heat-map labels and
//! the synthetic phantom generator.

pub mod heatmap;
pub mod io;
pub mod phantom;
pub mod sampling;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::Volume;

pub use heatmap::{make_heatmap_labels, DEFAULT_SIGMA_MM};
pub use io::{load_labels, load_volume, save_labels, save_volume};
pub use phantom::{generate_phantom, Phantom, PhantomSpec};
pub use sampling::{augment_random, augment_scale, sample_vois, SampleKind, SamplingSpec};

/// Intensity window in HU, mapped linearly onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSpec {
    pub window_lo: f64,
    pub window_hi: f64,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            window_lo: -500.0,
            window_hi: 1000.0,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_lo < self.window_hi) {
            return config_err(format!("window [{}, {}] is empty", self.window_lo, self.window_hi));
        }
        Ok(())
    }

    pub fn normalize(&self, hu: f64) -> f64 {
        ((hu - self.window_lo) / (self.window_hi - self.window_lo)).clamp(0.0, 1.0)
    }

    /// HU value that normalizes to `u`.
    pub fn to_hu(&self, u: f64) -> f64 {
        self.window_lo + u * (self.window_hi - self.window_lo)
    }
}

/// Clip to the window and rescale to `[0, 1]`.
pub fn preprocess(vol: &Volume, spec: &PreprocessSpec) -> Volume {
    Volume {
        data: vol.data.mapv(|v| spec.normalize(v as f64) as f32),
        spacing: vol.spacing,
        origin: vol.origin,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn hu(values: &[f32]) -> Volume {
        let data = Array3::from_shape_vec((values.len(), 1, 1), values.to_vec()).unwrap();
        Volume::new(data, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn window_endpoints_and_midpoint() {
        let out = preprocess(
            &hu(&[-500.0, 1000.0, 250.0, -2000.0, 3000.0]),
            &PreprocessSpec::default(),
        );
        assert_eq!(out.data.as_slice().unwrap(), &[0.0, 1.0, 0.5, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn monotone_and_idempotent(a in -3000.0f32..3000.0, b in -3000.0f32..3000.0) {
            let spec = PreprocessSpec::default();
            let out = preprocess(&hu(&[a.min(b), a.max(b)]), &spec);
            prop_assert!(out.data[[0, 0, 0]] <= out.data[[1, 0, 0]]);
            let back = hu(&out.data.iter().map(|&u| spec.to_hu(u as f64) as f32).collect::<Vec<_>>());
            let again = preprocess(&back, &spec);
            for (x, y) in again.data.iter().zip(out.data.iter()) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
