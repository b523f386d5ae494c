use super::param::{Param, ParamGroup, Parameterized};
use super::real::Real;
use super::tensor::Tensor;

/// Normalization mode for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only. Deterministic and batch-independent.
    Eval,
}

/// Per-channel batch normalization over batch and spatial axes.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    mode: Mode,
    normalized: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(channels, T::one()),
            beta: Param::zeros(channels),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Pass-through configuration: unit scale, zero shift, identity running statistics.
    pub fn set_identity(&mut self) {
        self.gamma.value.iter_mut().for_each(|v| *v = T::one());
        self.beta.value.iter_mut().for_each(|v| *v = T::zero());
        self.running_mean.iter_mut().for_each(|v| *v = T::zero());
        self.running_var
            .iter_mut()
            .for_each(|v| *v = T::one() - T::of(self.eps));
    }

    fn batch_stats(x: &Tensor<T>, c: usize) -> (T, T) {
        let n = x.batch();
        let count = T::of((n * x.voxels()) as f64);
        let mut mean = T::zero();
        for b in 0..n {
            mean += x.chan(b, c).iter().copied().sum::<T>();
        }
        mean /= count;
        let mut var = T::zero();
        for b in 0..n {
            var += x.chan(b, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
        }
        (mean, var / count)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, NormCache<T>) {
        let channels = x.channels();
        debug_assert_eq!(channels, self.channels());
        let mut normalized = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let mut inv_std = Vec::with_capacity(channels);
        let m = T::of(self.momentum);
        for c in 0..channels {
            let (mean, var) = match mode {
                Mode::Train => {
                    let (mean, var) = Self::batch_stats(x, c);
                    let count = (x.batch() * x.voxels()) as f64;
                    let unbiased = if count > 1.0 {
                        var * T::of(count / (count - 1.0))
                    } else {
                        var
                    };
                    self.running_mean[c] = (T::one() - m) * self.running_mean[c] + m * mean;
                    self.running_var[c] = (T::one() - m) * self.running_var[c] + m * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[c], self.running_var[c]),
            };
            let is = T::one() / (var + T::of(self.eps)).sqrt();
            inv_std.push(is);
            let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
            for b in 0..x.batch() {
                let src = x.chan(b, c);
                let nrm = normalized.chan_mut(b, c);
                for (d, &s) in nrm.iter_mut().zip(src) {
                    *d = (s - mean) * is;
                }
                let dst = out.chan_mut(b, c);
                for (d, &s) in dst.iter_mut().zip(normalized.chan(b, c)) {
                    *d = g * s + bt;
                }
            }
        }
        (
            out,
            NormCache {
                mode,
                normalized,
                inv_std,
            },
        )
    }

    /// Inference path: running statistics, no cache, no mutation.
    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(x.shape());
        for c in 0..x.channels() {
            let is = T::one() / (self.running_var[c] + T::of(self.eps)).sqrt();
            let scale = self.gamma.value[c] * is;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            for b in 0..x.batch() {
                for (d, &s) in out.chan_mut(b, c).iter_mut().zip(x.chan(b, c)) {
                    *d = s * scale + shift;
                }
            }
        }
        out
    }

    pub fn backward(&mut self, cache: &NormCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let n = dy.batch();
        let count = T::of((n * dy.voxels()) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for c in 0..dy.channels() {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                for (&g, &h) in dy.chan(b, c).iter().zip(cache.normalized.chan(b, c)) {
                    sum_dy += g;
                    sum_dy_xhat += g * h;
                }
            }
            self.beta.grad[c] += sum_dy;
            self.gamma.grad[c] += sum_dy_xhat;
            let g = self.gamma.value[c];
            let is = cache.inv_std[c];
            for b in 0..n {
                let out = dx.chan_mut(b, c);
                let (dyc, xh) = (dy.chan(b, c), cache.normalized.chan(b, c));
                match cache.mode {
                    Mode::Train => {
                        let k = g * is / count;
                        for i in 0..out.len() {
                            out[i] = k * (count * dyc[i] - sum_dy - xh[i] * sum_dy_xhat);
                        }
                    }
                    Mode::Eval => {
                        for i in 0..out.len() {
                            out[i] = g * is * dyc[i];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Real> Parameterized<T> for BatchNorm<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        if group.includes_weights() {
            f(&mut self.gamma);
            f(&mut self.beta);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}
