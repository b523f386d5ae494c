//! Deeply-supervised training objective shared by search and retraining.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, SideOutputs};
use crate::error::{shape_err, Error, Result};
use crate::nn::loss::{l2, soft_dice};
use crate::nn::{Mode, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Soft-Dice on the channel softmax against a one-hot target.
    Dice,
    /// Mean squared error on raw outputs (heat-map regression).
    L2,
}

/// A batch of network inputs and dense targets (one-hot classes or heat maps).
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(input: Tensor<T>, target: Tensor<T>) -> Result<Self> {
        if input.batch() == 0 {
            return Err(Error::EmptyBatch);
        }
        if input.batch() != target.batch() || input.spatial() != target.spatial() {
            return shape_err(format!(
                "input {:?} and target {:?} disagree",
                input.shape(),
                target.shape()
            ));
        }
        Ok(Self { input, target })
    }

    pub fn len(&self) -> usize {
        self.input.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.input.batch() == 0
    }

    /// Stack single-item batches.
    pub fn collate(items: &[Batch<T>]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let inputs: Vec<_> = items.iter().map(|b| b.input.clone()).collect();
        let targets: Vec<_> = items.iter().map(|b| b.target.clone()).collect();
        Self::new(Tensor::stack(&inputs)?, Tensor::stack(&targets)?)
    }
}

/// Unweighted mean of the loss over every fused side output, with per-output gradients.
pub fn deep_supervision<T: Real>(
    outputs: &SideOutputs<T>,
    target: &Tensor<T>,
    kind: LossKind,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let k = outputs.fused.len();
    let w = T::of(1.0 / k as f64);
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(k);
    for fused in &outputs.fused {
        if fused.shape() != target.shape() {
            return shape_err(format!(
                "output {:?} does not match target {:?}",
                fused.shape(),
                target.shape()
            ));
        }
        let (loss, mut g) = match kind {
            LossKind::Dice => soft_dice(fused, target),
            LossKind::L2 => l2(fused, target),
        };
        g.scale(w);
        total += loss.f64();
        grads.push(Some(g));
    }
    Ok((total / k as f64, grads))
}

/// Forward, loss and backward for one batch. Parameter gradients are accumulated
/// (callers zero them); returns the loss and the input gradient.
pub fn supervised_step<T: Real>(
    net: &mut Backbone<T>,
    batch: &Batch<T>,
    kind: LossKind,
    mode: Mode,
) -> Result<(f64, Tensor<T>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let (out, tape) = net.forward(&batch.input, mode)?;
    let (loss, grads) = deep_supervision(&out, &batch.target, kind)?;
    let dx = net.backward(&tape, &grads)?;
    Ok((loss, dx))
}

/// Loss of a batch without touching any state.
pub fn evaluate_loss<T: Real>(net: &Backbone<T>, batch: &Batch<T>, kind: LossKind) -> Result<f64> {
    let out = net.infer(&batch.input)?;
    Ok(deep_supervision(&out, &batch.target, kind)?.0)
}
