use super::real::Real;
use crate::error::{shape_err, Result};

/// Dense batch of multi-channel volumes laid out as `[batch, channel, x, y, z]`,
/// row-major with `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 5],
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: [usize; 5], value: T) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return shape_err(format!(
                "buffer of {} elements does not fill shape {:?}",
                data.len(),
                shape
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Contiguous voxels of one channel of one batch item.
    pub fn chan(&self, n: usize, c: usize) -> &[T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &self.data[start..start + v]
    }

    pub fn chan_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let v = self.voxels();
        let start = (n * self.shape[1] + c) * v;
        &mut self.data[start..start + v]
    }

    /// All channels of one batch item.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.shape[1] * self.voxels();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.shape[1] * self.voxels();
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add_assign(&mut self, w: T, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        super::real::axpy(&mut self.data, w, &other.data);
    }

    pub fn scale(&mut self, w: T) {
        for a in &mut self.data {
            *a *= w;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    /// Concatenate along the channel axis; all parts must agree on batch and spatial shape.
    pub fn concat_channels(parts: &[&Tensor<T>]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("nothing to concatenate");
        };
        let [n, _, x, y, z] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.spatial() != first.spatial() {
                return shape_err(format!("cannot concatenate {:?} with {:?}", p.shape, first.shape));
            }
        }
        let c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c * x * y * z);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Self {
            shape: [n, c, x, y, z],
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: split into consecutive channel groups.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if sizes.iter().sum::<usize>() != self.shape[1] {
            return shape_err(format!(
                "channel split {:?} does not match {} channels",
                sizes, self.shape[1]
            ));
        }
        let v = self.voxels();
        let mut out: Vec<Self> = sizes
            .iter()
            .map(|&c| Self::zeros([self.shape[0], c, self.shape[2], self.shape[3], self.shape[4]]))
            .collect();
        for b in 0..self.shape[0] {
            let mut off = 0;
            let src = self.item(b);
            for (part, &c) in out.iter_mut().zip(sizes) {
                part.item_mut(b).copy_from_slice(&src[off * v..(off + c) * v]);
                off += c;
            }
        }
        Ok(out)
    }

    /// Stack single-item tensors into one batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return shape_err("nothing to stack");
        };
        let mut shape = first.shape;
        let mut data = Vec::with_capacity(items.len() * first.data.len());
        for it in items {
            if it.shape[1..] != first.shape[1..] {
                return shape_err(format!("cannot stack {:?} with {:?}", it.shape, first.shape));
            }
            data.extend_from_slice(&it.data);
        }
        shape[0] = items.iter().map(|t| t.shape[0]).sum();
        Ok(Self { shape, data })
    }

    /// Extract batch item `n` as a batch of one.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, x, y, z] = self.shape;
        Self {
            shape: [1, c, x, y, z],
            data: self.item(n).to_vec(),
        }
    }

    /// Numerically stable softmax across channels at every voxel.
    pub fn softmax_channels(&self) -> Self {
        let mut out = self.clone();
        let [n, c, ..] = self.shape;
        let v = self.voxels();
        for b in 0..n {
            let item = out.item_mut(b);
            for i in 0..v {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(item[k * v + i]);
                }
                let mut s = T::zero();
                for k in 0..c {
                    let e = (item[k * v + i] - m).exp();
                    item[k * v + i] = e;
                    s += e;
                }
                for k in 0..c {
                    item[k * v + i] /= s;
                }
            }
        }
        out
    }
}

/// Row-major flat index into an `[x, y, z]` grid.
#[inline]
pub fn flat(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    (x * dims[1] + y) * dims[2] + z
}
