use super::real::Real;
use super::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;

/// Soft-Dice loss on probabilities against a one-hot target, averaged over
/// foreground channels (channel 0 is background and is not scored).
///
/// Returns the loss and its gradient with respect to the probabilities.
pub fn soft_dice_probs<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    debug_assert_eq!(probs.shape(), target.shape());
    let [n, c, ..] = probs.shape();
    let mut grad = Tensor::zeros(probs.shape());
    if c < 2 {
        return (T::zero(), grad);
    }
    let eps = T::of(DICE_EPS);
    let k = T::of((c - 1) as f64);
    let mut loss = T::zero();
    for ch in 1..c {
        let (mut inter, mut ps, mut gs) = (T::zero(), T::zero(), T::zero());
        for b in 0..n {
            for (&p, &g) in probs.chan(b, ch).iter().zip(target.chan(b, ch)) {
                inter += p * g;
                ps += p;
                gs += g;
            }
        }
        let num = T::of(2.0) * inter + eps;
        let den = ps + gs + eps;
        loss += T::one() - num / den;
        let den2 = den * den;
        for b in 0..n {
            let tg = target.chan(b, ch);
            for (d, &g) in grad.chan_mut(b, ch).iter_mut().zip(tg) {
                *d = -(T::of(2.0) * g * den - num) / (den2 * k);
            }
        }
    }
    (loss / k, grad)
}

/// Backpropagate a probability gradient through a channel softmax.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let [n, c, ..] = probs.shape();
    let v = probs.voxels();
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..n {
        let (p, dp) = (probs.item(b), dprobs.item(b));
        let o = out.item_mut(b);
        for i in 0..v {
            let mut s = T::zero();
            for k in 0..c {
                s += p[k * v + i] * dp[k * v + i];
            }
            for k in 0..c {
                o[k * v + i] = p[k * v + i] * (dp[k * v + i] - s);
            }
        }
    }
    out
}

/// Soft-Dice on logits: softmax, Dice, and the gradient with respect to the logits.
pub fn soft_dice<T: Real>(logits: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    let probs = logits.softmax_channels();
    let (loss, dp) = soft_dice_probs(&probs, target);
    (loss, softmax_backward(&probs, &dp))
}

/// Mean squared error and its gradient.
pub fn l2<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    debug_assert_eq!(pred.shape(), target.shape());
    let count = T::of(pred.data().len().max(1) as f64);
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = T::zero();
    for ((d, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let e = p - t;
        loss += e * e;
        *d = T::of(2.0) * e / count;
    }
    (loss / count, grad)
}
