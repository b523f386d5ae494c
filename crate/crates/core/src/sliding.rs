//! Whole-volume inference by averaging overlapping window predictions.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{config_err, shape_err, Result};
use crate::nn::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlidingSpec {
    pub window: [usize; 3],
    pub stride: [usize; 3],
}

impl Default for SlidingSpec {
    fn default() -> Self {
        Self {
            window: [128, 128, 64],
            stride: [96, 96, 32],
        }
    }
}

impl SlidingSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.stride[a] == 0 || self.stride[a] > self.window[a] {
                return config_err(format!(
                    "stride {:?} must satisfy 0 < stride <= window {:?}",
                    self.stride, self.window
                ));
            }
        }
        Ok(())
    }
}

/// Window starts along one axis: every `stride` voxels, with the last window
/// flush against the far boundary.
pub fn window_origins(len: usize, window: usize, stride: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut o = 0;
    while o + window < len {
        out.push(o);
        o += stride;
    }
    out.push(len - window);
    out.dedup();
    out
}

/// Anything mapping a `[1, C, x, y, z]` window to per-class probabilities.
pub trait Predictor {
    fn predict(&self, window: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl<F: Fn(&Tensor<f32>) -> Result<Tensor<f32>>> Predictor for F {
    fn predict(&self, window: &Tensor<f32>) -> Result<Tensor<f32>> {
        self(window)
    }
}

impl Predictor for Backbone<f32> {
    fn predict(&self, window: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(self.infer(window)?.final_probs())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingOutput {
    pub probs: Tensor<f32>,
    pub windows: usize,
    /// Axes on which the volume was smaller than the window and had to be padded.
    pub padded_axes: Vec<usize>,
}

fn copy_region<T: Real>(src: &Tensor<T>, start: [usize; 3], size: [usize; 3]) -> Tensor<T> {
    let [_, c, _, _, _] = src.shape();
    let d = src.spatial();
    let mut out = Tensor::zeros([1, c, size[0], size[1], size[2]]);
    for ch in 0..c {
        let s = src.chan(0, ch);
        let o = out.chan_mut(0, ch);
        for x in 0..size[0] {
            for y in 0..size[1] {
                let si = ((start[0] + x) * d[1] + start[1] + y) * d[2] + start[2];
                let oi = (x * size[1] + y) * size[2];
                o[oi..oi + size[2]].copy_from_slice(&s[si..si + size[2]]);
            }
        }
    }
    out
}

/// Replicate edge voxels until every axis is at least `min` long.
fn pad_edge(x: &Tensor<f32>, min: [usize; 3]) -> Tensor<f32> {
    let d = x.spatial();
    let p = [0, 1, 2].map(|a| d[a].max(min[a]));
    let c = x.channels();
    let mut out = Tensor::zeros([1, c, p[0], p[1], p[2]]);
    for ch in 0..c {
        let s = x.chan(0, ch);
        let o = out.chan_mut(0, ch);
        for i in 0..p[0] {
            for j in 0..p[1] {
                for k in 0..p[2] {
                    let (si, sj, sk) = (i.min(d[0] - 1), j.min(d[1] - 1), k.min(d[2] - 1));
                    o[(i * p[1] + j) * p[2] + k] = s[(si * d[1] + sj) * d[2] + sk];
                }
            }
        }
    }
    out
}

/// Run `model` over overlapping windows of a single-item input and average the
/// per-window probabilities, renormalizing each voxel's channels to sum to one.
/// Windows are accumulated in a fixed raster order.
pub fn sliding_infer(model: &dyn Predictor, input: &Tensor<f32>, spec: &SlidingSpec) -> Result<SlidingOutput> {
    sliding_mean(model, input, spec, true)
}

/// Window-averaged model output; `renormalize` is off for regression outputs.
pub fn sliding_mean(
    model: &dyn Predictor,
    input: &Tensor<f32>,
    spec: &SlidingSpec,
    renormalize: bool,
) -> Result<SlidingOutput> {
    spec.validate()?;
    if input.batch() != 1 {
        return shape_err(format!(
            "sliding inference takes one volume, got batch {}",
            input.batch()
        ));
    }
    let orig = input.spatial();
    let padded_axes: Vec<usize> = (0..3).filter(|&a| orig[a] < spec.window[a]).collect();
    if !padded_axes.is_empty() {
        log::warn!(
            "volume {orig:?} is smaller than the window {:?}; padding axes {padded_axes:?}",
            spec.window
        );
    }
    let vol = if padded_axes.is_empty() {
        input.clone()
    } else {
        pad_edge(input, spec.window)
    };
    let d = vol.spatial();
    let w = spec.window;
    let origins: Vec<Vec<usize>> = (0..3).map(|a| window_origins(d[a], w[a], spec.stride[a])).collect();
    let mut sum: Option<Tensor<f32>> = None;
    let mut count = vec![0u32; d[0] * d[1] * d[2]];
    let mut windows = 0;
    for &ox in &origins[0] {
        for &oy in &origins[1] {
            for &oz in &origins[2] {
                let win = copy_region(&vol, [ox, oy, oz], w);
                let p = model.predict(&win)?;
                if p.batch() != 1 || p.spatial() != w {
                    return shape_err(format!("model returned {:?} for a {w:?} window", p.shape()));
                }
                let acc = sum.get_or_insert_with(|| Tensor::zeros([1, p.channels(), d[0], d[1], d[2]]));
                if acc.channels() != p.channels() {
                    return shape_err("model changed its channel count between windows");
                }
                for ch in 0..p.channels() {
                    let src = p.chan(0, ch);
                    let dst = acc.chan_mut(0, ch);
                    for x in 0..w[0] {
                        for y in 0..w[1] {
                            let di = ((ox + x) * d[1] + oy + y) * d[2] + oz;
                            let si = (x * w[1] + y) * w[2];
                            for k in 0..w[2] {
                                dst[di + k] += src[si + k];
                            }
                        }
                    }
                }
                for x in 0..w[0] {
                    for y in 0..w[1] {
                        let di = ((ox + x) * d[1] + oy + y) * d[2] + oz;
                        count[di..di + w[2]].iter_mut().for_each(|c| *c += 1);
                    }
                }
                windows += 1;
            }
        }
    }
    let mut acc = sum.expect("at least one window");
    let c = acc.channels();
    let n = d[0] * d[1] * d[2];
    for i in 0..n {
        debug_assert!(count[i] > 0);
        let inv = 1.0 / count[i] as f32;
        let mut total = 0.0f32;
        for ch in 0..c {
            let v = &mut acc.chan_mut(0, ch)[i];
            *v *= inv;
            total += *v;
        }
        if renormalize && total > 0.0 {
            for ch in 0..c {
                acc.chan_mut(0, ch)[i] /= total;
            }
        }
    }
    let probs = if padded_axes.is_empty() {
        acc
    } else {
        copy_region(&acc, [0; 3], orig)
    };
    Ok(SlidingOutput {
        probs,
        windows,
        padded_axes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: usize, v: f32) -> impl Fn(&Tensor<f32>) -> Result<Tensor<f32>> {
        move |x: &Tensor<f32>| {
            let s = x.spatial();
            Ok(Tensor::full([1, c, s[0], s[1], s[2]], v))
        }
    }

    #[test]
    fn default_tiling_of_224_224_96() {
        let s = SlidingSpec::default();
        assert_eq!(window_origins(224, 128, 96), vec![0, 96]);
        assert_eq!(window_origins(96, 64, 32), vec![0, 32]);
        assert_eq!(window_origins(128, 128, 96), vec![0]);
        assert_eq!(window_origins(300, 128, 96), vec![0, 96, 172]);
        let x = Tensor::<f32>::zeros([1, 1, 224, 224, 96]);
        let out = sliding_infer(&constant(2, 0.5), &x, &s).unwrap();
        assert_eq!(out.windows, 8);
        assert!(out.probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn aggregation_is_mean_then_renormalized() {
        // The model reports each window's x origin in channel 0; overlapping windows average.
        let model = |x: &Tensor<f32>| {
            let s = x.spatial();
            let first = x.chan(0, 0)[0];
            let mut t = Tensor::full([1, 2, s[0], s[1], s[2]], 1.0 - first);
            t.chan_mut(0, 0).iter_mut().for_each(|v| *v = first);
            Ok(t)
        };
        let mut x = Tensor::<f32>::zeros([1, 1, 6, 2, 2]);
        for i in 0..6 {
            for j in 0..4 {
                x.chan_mut(0, 0)[i * 4 + j] = if i >= 2 { 1.0 } else { 0.0 };
            }
        }
        let spec = SlidingSpec {
            window: [4, 2, 2],
            stride: [2, 2, 2],
        };
        let out = sliding_infer(&model, &x, &spec).unwrap();
        assert_eq!(out.windows, 2);
        let p0 = out.probs.chan(0, 0);
        assert_eq!(p0[0], 0.0);
        assert_eq!(p0[2 * 4], 0.5);
        assert_eq!(p0[5 * 4], 1.0);
        for i in 0..24 {
            assert!((p0[i] + out.probs.chan(0, 1)[i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn small_volume_is_padded_and_recorded() {
        let x = Tensor::<f32>::zeros([1, 1, 10, 20, 8]);
        let spec = SlidingSpec {
            window: [16, 16, 8],
            stride: [8, 8, 8],
        };
        let out = sliding_infer(&constant(3, 1.0 / 3.0), &x, &spec).unwrap();
        assert_eq!(out.padded_axes, vec![0]);
        assert_eq!(out.probs.spatial(), [10, 20, 8]);
        assert_eq!(out.windows, 2);
    }

    #[test]
    fn invalid_stride_rejected() {
        let s = SlidingSpec {
            window: [8, 8, 8],
            stride: [9, 8, 8],
        };
        assert!(s.validate().is_err());
    }
}
