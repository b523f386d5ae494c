use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the network stack.
///
/// Training runs in `f32`; gradient checks instantiate the same code in `f64`.
pub trait Real:
    Float + Sum + AddAssign + SubAssign + MulAssign + DivAssign + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// `acc[i] += w * src[i]` over the shorter of the two slices.
#[inline]
pub fn axpy<T: Real>(acc: &mut [T], w: T, src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a += w * s;
    }
}

/// Dot product with split accumulators so the loop vectorizes.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    lanes.iter().fold(s, |acc, &l| acc + l)
}
