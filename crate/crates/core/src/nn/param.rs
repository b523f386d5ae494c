use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::real::Real;

/// A learnable parameter buffer together with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(len: usize) -> Self {
        Self::filled(len, T::zero())
    }

    pub fn filled(len: usize, v: T) -> Self {
        Self {
            value: vec![v; len],
            grad: vec![T::zero(); len],
        }
    }

    pub fn from_values(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    /// He-normal initialization for a layer with the given fan-in.
    pub fn he_normal(len: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self::from_values((0..len).map(|_| T::of(dist.sample(rng))).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

/// Which parameters a traversal should visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Convolution, normalization and head weights.
    Weights,
    /// Architecture logits of relaxed blocks.
    Architecture,
    All,
}

impl ParamGroup {
    pub fn includes_weights(self) -> bool {
        matches!(self, Self::Weights | Self::All)
    }

    pub fn includes_architecture(self) -> bool {
        matches!(self, Self::Architecture | Self::All)
    }
}

/// Anything that owns parameters in a stable traversal order.
pub trait Parameterized<T: Real> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>));

    /// Non-learnable state (normalization running statistics), in traversal order.
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut [T])) {}

    fn zero_grad(&mut self) {
        self.visit_params(ParamGroup::All, &mut |p| p.zero_grad());
    }

    fn param_count(&mut self, group: ParamGroup) -> usize {
        let mut n = 0;
        self.visit_params(group, &mut |p| n += p.len());
        n
    }

    /// Parameter values of every group plus buffers, flattened in traversal order.
    fn state_vector(&mut self) -> Vec<T> {
        let mut out = self.snapshot(ParamGroup::All);
        self.visit_buffers(&mut |b| out.extend_from_slice(b));
        out
    }

    /// Inverse of [`Parameterized::state_vector`].
    fn load_state_vector(&mut self, state: &[T]) -> crate::Result<()> {
        let expected = self.state_vector().len();
        if state.len() != expected {
            return Err(crate::Error::Shape(format!(
                "state has {} values, model needs {expected}",
                state.len()
            )));
        }
        let mut off = 0;
        self.visit_params(ParamGroup::All, &mut |p| {
            let n = p.value.len();
            p.value.copy_from_slice(&state[off..off + n]);
            off += n;
        });
        self.visit_buffers(&mut |b| {
            let n = b.len();
            b.copy_from_slice(&state[off..off + n]);
            off += n;
        });
        Ok(())
    }

    /// Flattened copy of all values in the group, in traversal order.
    fn snapshot(&mut self, group: ParamGroup) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(group, &mut |p| out.extend_from_slice(&p.value));
        out
    }
}
