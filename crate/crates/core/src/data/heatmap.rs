use ndarray::{Array3, Array4, Axis};

use crate::model::{center_of_mass, HeatMapSet, LabelMap, OarCatalog};
use crate::nn::Real;

pub const DEFAULT_SIGMA_MM: f64 = 8.0;

/// Unit-peak Gaussian centred on a voxel, with distances measured in mm.
pub fn gaussian_map<T: Real>(shape: [usize; 3], center: [f64; 3], spacing: [f64; 3], sigma_mm: f64) -> Array3<T> {
    let k = -0.5 / (sigma_mm * sigma_mm);
    let axis = |a: usize| -> Vec<f64> {
        (0..shape[a])
            .map(|i| {
                let d = (i as f64 - center[a]) * spacing[a];
                d * d
            })
            .collect()
    };
    let (dx, dy, dz) = (axis(0), axis(1), axis(2));
    Array3::from_shape_fn((shape[0], shape[1], shape[2]), |(x, y, z)| {
        T::of(((dx[x] + dy[y] + dz[z]) * k).exp())
    })
}

/// One channel per small-organ heat channel of the catalog, peaking at 1 on the
/// rounded center of mass of the channel's organs. Absent organs give a zero channel.
pub fn make_heatmap_labels(labels: &LabelMap, catalog: &OarCatalog, sigma_mm: f64) -> HeatMapSet {
    let channels = catalog.heat_channels();
    let s = labels.shape();
    let mut data = Array4::<f32>::zeros((channels.len(), s[0], s[1], s[2]));
    for (c, ch) in channels.iter().enumerate() {
        let center = center_of_mass(labels.data.view(), |v| ch.organs.contains(v));
        if let Some(ctr) = center {
            let g = gaussian_map::<f32>(s, ctr.map(|v| v as f64), labels.spacing, sigma_mm);
            data.index_axis_mut(Axis(0), c).assign(&g);
        }
    }
    HeatMapSet {
        data,
        sigma_mm,
        spacing: labels.spacing,
        origin: labels.origin,
    }
}
