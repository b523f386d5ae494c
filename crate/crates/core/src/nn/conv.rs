//! Stride-1 3D convolution with symmetric zero padding.
//!
//! Every channel is copied into a zero-padded grid. In padded coordinates a kernel
//! tap is a constant flat offset, so each tap becomes one long contiguous
//! multiply-accumulate. Outputs are computed over the flat span between the first
//! and last interior voxel; positions that fall in the padding are discarded.

use rand::Rng;

use super::param::{Param, ParamGroup, Parameterized};
use super::real::{axpy, dot, Real};
use super::tensor::{flat, Tensor};
use crate::error::{shape_err, Result};

const CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
    /// `[out][in][kx][ky][kz]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

/// Padded-grid geometry shared by forward and backward.
struct Padded {
    dims: [usize; 3],
    len: usize,
    /// Flat index of interior voxel (0, 0, 0).
    first: usize,
    /// Length of the span from the first to the last interior voxel.
    span: usize,
    offsets: Vec<isize>,
}

impl Padded {
    fn new(spatial: [usize; 3], kernel: [usize; 3]) -> Self {
        let pad = kernel.map(|k| k / 2);
        let dims = [
            spatial[0] + 2 * pad[0],
            spatial[1] + 2 * pad[1],
            spatial[2] + 2 * pad[2],
        ];
        let first = flat(dims, pad[0], pad[1], pad[2]);
        let last = flat(
            dims,
            spatial[0] - 1 + pad[0],
            spatial[1] - 1 + pad[1],
            spatial[2] - 1 + pad[2],
        );
        let mut offsets = Vec::with_capacity(kernel.iter().product());
        for a in 0..kernel[0] {
            for b in 0..kernel[1] {
                for c in 0..kernel[2] {
                    let dx = a as isize - pad[0] as isize;
                    let dy = b as isize - pad[1] as isize;
                    let dz = c as isize - pad[2] as isize;
                    offsets.push((dx * dims[1] as isize + dy) * dims[2] as isize + dz);
                }
            }
        }
        Self {
            dims,
            len: dims.iter().product(),
            first,
            span: last - first + 1,
            offsets,
        }
    }
}

fn pad_into<T: Real>(geom: &Padded, src: &[T], spatial: [usize; 3], dst: &mut [T]) {
    dst.iter_mut().for_each(|v| *v = T::zero());
    let [nx, ny, nz] = spatial;
    let pad = [
        (geom.dims[0] - nx) / 2,
        (geom.dims[1] - ny) / 2,
        (geom.dims[2] - nz) / 2,
    ];
    for x in 0..nx {
        for y in 0..ny {
            let s = flat(spatial, x, y, 0);
            let d = flat(geom.dims, x + pad[0], y + pad[1], pad[2]);
            dst[d..d + nz].copy_from_slice(&src[s..s + nz]);
        }
    }
}

/// Copy interior rows of a span-relative buffer (index 0 == `geom.first`) out to an unpadded grid.
fn extract_span<T: Real>(geom: &Padded, span: &[T], spatial: [usize; 3], dst: &mut [T]) {
    let [nx, ny, nz] = spatial;
    for x in 0..nx {
        for y in 0..ny {
            let d = flat(spatial, x, y, 0);
            let s = x * geom.dims[1] * geom.dims[2] + y * geom.dims[2];
            dst[d..d + nz].copy_from_slice(&span[s..s + nz]);
        }
    }
}

/// Inverse of [`extract_span`]: scatter an unpadded grid into a zeroed span buffer.
fn scatter_span<T: Real>(geom: &Padded, src: &[T], spatial: [usize; 3], span: &mut [T]) {
    span.iter_mut().for_each(|v| *v = T::zero());
    let [nx, ny, nz] = spatial;
    for x in 0..nx {
        for y in 0..ny {
            let s = flat(spatial, x, y, 0);
            let d = x * geom.dims[1] * geom.dims[2] + y * geom.dims[2];
            span[d..d + nz].copy_from_slice(&src[s..s + nz]);
        }
    }
}

impl<T: Real> Conv3d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3], bias: bool, rng: &mut impl Rng) -> Self {
        let kvol: usize = kernel.iter().product();
        let n = out_channels * in_channels * kvol;
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::he_normal(n, in_channels * kvol, rng),
            bias: bias.then(|| Param::zeros(out_channels)),
        }
    }

    /// A layer with all weights (and bias) set to zero.
    pub fn zeroed(in_channels: usize, out_channels: usize, kernel: [usize; 3], bias: bool) -> Self {
        let kvol: usize = kernel.iter().product();
        Self {
            in_channels,
            out_channels,
            kernel,
            weight: Param::zeros(out_channels * in_channels * kvol),
            bias: bias.then(|| Param::zeros(out_channels)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    fn kvol(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Set every kernel to a centred delta on the matching channel (identity map when
    /// `in == out`).
    pub fn set_identity(&mut self) {
        let kvol = self.kvol();
        let centre = flat(self.kernel, self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2);
        self.weight.value.iter_mut().for_each(|w| *w = T::zero());
        for c in 0..self.in_channels.min(self.out_channels) {
            self.weight.value[(c * self.in_channels + c) * kvol + centre] = T::one();
        }
        if let Some(b) = &mut self.bias {
            b.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return shape_err(format!(
                "convolution expects {} input channels, got {}",
                self.in_channels,
                x.channels()
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let [n, cin, sx, sy, sz] = x.shape();
        let spatial = [sx, sy, sz];
        let geom = Padded::new(spatial, self.kernel);
        let kvol = self.kvol();
        let mut out = Tensor::zeros([n, self.out_channels, sx, sy, sz]);
        let mut xp = vec![T::zero(); cin * geom.len];
        let mut acc = vec![T::zero(); geom.span];
        for b in 0..n {
            for ci in 0..cin {
                pad_into(
                    &geom,
                    x.chan(b, ci),
                    spatial,
                    &mut xp[ci * geom.len..(ci + 1) * geom.len],
                );
            }
            for co in 0..self.out_channels {
                let b0 = self.bias.as_ref().map_or(T::zero(), |p| p.value[co]);
                acc.iter_mut().for_each(|v| *v = b0);
                for s in (0..geom.span).step_by(CHUNK) {
                    let e = (s + CHUNK).min(geom.span);
                    let a = &mut acc[s..e];
                    for ci in 0..cin {
                        let xs = &xp[ci * geom.len..(ci + 1) * geom.len];
                        let ws = &self.weight.value[(co * cin + ci) * kvol..(co * cin + ci + 1) * kvol];
                        for (&w, &off) in ws.iter().zip(&geom.offsets) {
                            let start = (geom.first + s) as isize + off;
                            axpy(a, w, &xs[start as usize..]);
                        }
                    }
                }
                extract_span(&geom, &acc, spatial, out.chan_mut(b, co));
            }
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let [n, cin, sx, sy, sz] = x.shape();
        if dy.shape() != [n, self.out_channels, sx, sy, sz] {
            return shape_err(format!("gradient shape {:?} does not match output", dy.shape()));
        }
        let spatial = [sx, sy, sz];
        let geom = Padded::new(spatial, self.kernel);
        let kvol = self.kvol();
        let cout = self.out_channels;
        let mut dx = Tensor::zeros(x.shape());
        let mut xp = vec![T::zero(); cin * geom.len];
        let mut dyp = vec![T::zero(); cout * geom.span];
        let mut dxp = vec![T::zero(); cin * geom.len];
        for b in 0..n {
            for ci in 0..cin {
                pad_into(
                    &geom,
                    x.chan(b, ci),
                    spatial,
                    &mut xp[ci * geom.len..(ci + 1) * geom.len],
                );
            }
            for co in 0..cout {
                let g = dy.chan(b, co);
                if let Some(bias) = &mut self.bias {
                    bias.grad[co] += g.iter().copied().sum::<T>();
                }
                scatter_span(&geom, g, spatial, &mut dyp[co * geom.span..(co + 1) * geom.span]);
            }
            dxp.iter_mut().for_each(|v| *v = T::zero());
            for s in (0..geom.span).step_by(CHUNK) {
                let e = (s + CHUNK).min(geom.span);
                for co in 0..cout {
                    let g = &dyp[co * geom.span + s..co * geom.span + e];
                    for ci in 0..cin {
                        let base = (co * cin + ci) * kvol;
                        let xs = &xp[ci * geom.len..(ci + 1) * geom.len];
                        let dxs = &mut dxp[ci * geom.len..(ci + 1) * geom.len];
                        for (k, &off) in geom.offsets.iter().enumerate() {
                            let start = ((geom.first + s) as isize + off) as usize;
                            self.weight.grad[base + k] += dot(g, &xs[start..start + (e - s)]);
                            let w = self.weight.value[base + k];
                            axpy(&mut dxs[start..start + (e - s)], w, g);
                        }
                    }
                }
            }
            for ci in 0..cin {
                let src = &dxp[ci * geom.len..(ci + 1) * geom.len];
                let dst = dx.chan_mut(b, ci);
                let [nx, ny, nz] = spatial;
                let pad = self.kernel.map(|k| k / 2);
                for xx in 0..nx {
                    for yy in 0..ny {
                        let d = flat(spatial, xx, yy, 0);
                        let p = flat(geom.dims, xx + pad[0], yy + pad[1], pad[2]);
                        dst[d..d + nz].copy_from_slice(&src[p..p + nz]);
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl<T: Real> Parameterized<T> for Conv3d<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        if group.includes_weights() {
            f(&mut self.weight);
            if let Some(b) = &mut self.bias {
                f(b);
            }
        }
    }
}
