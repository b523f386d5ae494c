use super::real::Real;
use super::tensor::{flat, Tensor};
use crate::error::{shape_err, Result};

/// Max pooling with non-overlapping windows of `factor` voxels per axis.
#[derive(Debug, Clone)]
pub struct PoolCache {
    input_shape: [usize; 5],
    /// Flat input index (within its channel) of the winning voxel for every output voxel.
    argmax: Vec<u32>,
}

pub fn max_pool<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Result<(Tensor<T>, PoolCache)> {
    let [n, c, sx, sy, sz] = x.shape();
    let spatial = [sx, sy, sz];
    if (0..3).any(|a| factor[a] == 0 || spatial[a] % factor[a] != 0) {
        return shape_err(format!(
            "shape {spatial:?} is not divisible by pooling factor {factor:?}"
        ));
    }
    let od = [sx / factor[0], sy / factor[1], sz / factor[2]];
    let mut out = Tensor::zeros([n, c, od[0], od[1], od[2]]);
    let mut argmax = Vec::with_capacity(out.data().len());
    for b in 0..n {
        for ch in 0..c {
            let src = x.chan(b, ch);
            let dst = out.chan_mut(b, ch);
            for i in 0..od[0] {
                for j in 0..od[1] {
                    for k in 0..od[2] {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for a in 0..factor[0] {
                            for bb in 0..factor[1] {
                                for cc in 0..factor[2] {
                                    let idx = flat(spatial, i * factor[0] + a, j * factor[1] + bb, k * factor[2] + cc);
                                    if src[idx] > best {
                                        best = src[idx];
                                        at = idx;
                                    }
                                }
                            }
                        }
                        dst[flat(od, i, j, k)] = best;
                        argmax.push(at as u32);
                    }
                }
            }
        }
    }
    Ok((
        out,
        PoolCache {
            input_shape: x.shape(),
            argmax,
        },
    ))
}

pub fn max_pool_backward<T: Real>(cache: &PoolCache, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(cache.input_shape);
    let [n, c, ..] = cache.input_shape;
    let ov = dy.voxels();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * ov;
            let g = dy.chan(b, ch);
            let dst = dx.chan_mut(b, ch);
            for (o, &gv) in g.iter().enumerate() {
                dst[cache.argmax[base + o] as usize] += gv;
            }
        }
    }
    dx
}

/// Max pooling without a backward cache.
pub fn max_pool_infer<T: Real>(x: &Tensor<T>, factor: [usize; 3]) -> Result<Tensor<T>> {
    max_pool(x, factor).map(|(y, _)| y)
}
