//! Separable linear and nearest-neighbour resizing of 3D grids.
//!
//! Sample positions use the half-voxel convention: output voxel `i` looks at source
//! coordinate `(i + 0.5) * src / dst - 0.5`, clamped to the source extent.

use super::real::Real;
use super::tensor::Tensor;

/// `(lower index, upper index, weight of upper)` per output position.
fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let coord = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = coord.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, coord - lo as f64)
        })
        .collect()
}

fn strides(dims: [usize; 3], axis: usize) -> (usize, usize) {
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    (outer, inner)
}

fn linear_axis<T: Real>(src: &[T], dims: [usize; 3], axis: usize, len: usize) -> (Vec<T>, [usize; 3]) {
    if dims[axis] == len {
        return (src.to_vec(), dims);
    }
    let taps = linear_taps(dims[axis], len);
    let (outer, inner) = strides(dims, axis);
    let mut nd = dims;
    nd[axis] = len;
    let mut out = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for (i, &(lo, hi, w)) in taps.iter().enumerate() {
            let w = T::of(w);
            let a = &src[(o * dims[axis] + lo) * inner..][..inner];
            let b = &src[(o * dims[axis] + hi) * inner..][..inner];
            let d = &mut out[(o * len + i) * inner..][..inner];
            for k in 0..inner {
                d[k] = a[k] + w * (b[k] - a[k]);
            }
        }
    }
    (out, nd)
}

fn linear_axis_adjoint<T: Real>(grad: &[T], dims: [usize; 3], axis: usize, src_len: usize) -> (Vec<T>, [usize; 3]) {
    if dims[axis] == src_len {
        return (grad.to_vec(), dims);
    }
    let len = dims[axis];
    let taps = linear_taps(src_len, len);
    let (outer, inner) = strides(dims, axis);
    let mut nd = dims;
    nd[axis] = src_len;
    let mut out = vec![T::zero(); outer * src_len * inner];
    for o in 0..outer {
        for (i, &(lo, hi, w)) in taps.iter().enumerate() {
            let w = T::of(w);
            let g = &grad[(o * len + i) * inner..][..inner];
            for k in 0..inner {
                out[(o * src_len + lo) * inner + k] += (T::one() - w) * g[k];
                out[(o * src_len + hi) * inner + k] += w * g[k];
            }
        }
    }
    (out, nd)
}

/// Trilinear resize of one grid.
pub fn resize_linear<T: Real>(src: &[T], dims: [usize; 3], target: [usize; 3]) -> Vec<T> {
    let (a, d) = linear_axis(src, dims, 2, target[2]);
    let (b, d) = linear_axis(&a, d, 1, target[1]);
    linear_axis(&b, d, 0, target[0]).0
}

/// Adjoint of [`resize_linear`]: maps a gradient on the target grid back to the source grid.
pub fn resize_linear_adjoint<T: Real>(grad: &[T], src_dims: [usize; 3], target: [usize; 3]) -> Vec<T> {
    let (a, d) = linear_axis_adjoint(grad, target, 0, src_dims[0]);
    let (b, d) = linear_axis_adjoint(&a, d, 1, src_dims[1]);
    linear_axis_adjoint(&b, d, 2, src_dims[2]).0
}

/// Nearest-neighbour resize, for label grids.
pub fn resize_nearest<V: Copy>(src: &[V], dims: [usize; 3], target: [usize; 3]) -> Vec<V> {
    let pick = |s: usize, d: usize| -> Vec<usize> {
        (0..d)
            .map(|i| (((i as f64 + 0.5) * s as f64 / d as f64) as usize).min(s - 1))
            .collect()
    };
    let (px, py, pz) = (
        pick(dims[0], target[0]),
        pick(dims[1], target[1]),
        pick(dims[2], target[2]),
    );
    let mut out = Vec::with_capacity(target.iter().product());
    for &x in &px {
        for &y in &py {
            for &z in &pz {
                out.push(src[(x * dims[1] + y) * dims[2] + z]);
            }
        }
    }
    out
}

/// Trilinear resize of every channel of a batch.
pub fn upsample<T: Real>(x: &Tensor<T>, target: [usize; 3]) -> Tensor<T> {
    let [n, c, ..] = x.shape();
    if x.spatial() == target {
        return x.clone();
    }
    let mut out = Tensor::zeros([n, c, target[0], target[1], target[2]]);
    for b in 0..n {
        for ch in 0..c {
            let r = resize_linear(x.chan(b, ch), x.spatial(), target);
            out.chan_mut(b, ch).copy_from_slice(&r);
        }
    }
    out
}

pub fn upsample_adjoint<T: Real>(grad: &Tensor<T>, src: [usize; 3]) -> Tensor<T> {
    let [n, c, ..] = grad.shape();
    if grad.spatial() == src {
        return grad.clone();
    }
    let mut out = Tensor::zeros([n, c, src[0], src[1], src[2]]);
    for b in 0..n {
        for ch in 0..c {
            let r = resize_linear_adjoint(grad.chan(b, ch), src, grad.spatial());
            out.chan_mut(b, ch).copy_from_slice(&r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_exact() {
        let v: Vec<f64> = (0..24).map(|i| i as f64 * 0.5).collect();
        assert_eq!(resize_linear(&v, [2, 3, 4], [2, 3, 4]), v);
    }

    #[test]
    fn constant_field_stays_constant() {
        let v = vec![2.5f64; 8];
        assert!(resize_linear(&v, [2, 2, 2], [5, 4, 3])
            .iter()
            .all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn linear_ramp_interior_is_reproduced() {
        // ramp along x sampled at voxel centres stays a ramp after 2x upsampling
        let v: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let up = resize_linear(&v, [4, 1, 1], [8, 1, 1]);
        for i in 1..7 {
            let expected = (i as f64 + 0.5) * 0.5 - 0.5;
            assert!((up[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let src: Vec<f64> = (0..3 * 2 * 4).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let g: Vec<f64> = (0..6 * 4 * 8).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let fwd = resize_linear(&src, [3, 2, 4], [6, 4, 8]);
        let adj = resize_linear_adjoint(&g, [3, 2, 4], [6, 4, 8]);
        let lhs: f64 = fwd.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn nearest_doubles_voxels() {
        let v = vec![1u16, 2];
        assert_eq!(resize_nearest(&v, [2, 1, 1], [4, 1, 1]), vec![1, 1, 2, 2]);
    }
}
