//! Differentiable search over the per-block operator choice.
//!
//! Every block of the super-network holds six architecture logits. Its output is
//! the softmax-weighted sum of all six candidate operators, so the logits receive
//! gradients like any other parameter. Search alternates weight updates on training
//! batches with logit updates on validation batches; afterwards each block keeps
//! its highest-logit operator.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BlockOps, CandidateCache, CandidateKind, CandidateOp};
use crate::error::{config_err, Error, Result};
use crate::nn::{Mode, Optimizer, OptimizerSpec, Param, ParamGroup, Parameterized, Real, Tensor};
use crate::objective::{supervised_step, Batch, LossKind};

/// Softmax of the six architecture logits.
pub fn relax_weights(alphas: &[f64]) -> Result<[f64; 6]> {
    if alphas.len() != 6 {
        return Err(Error::InvalidValue(format!("expected 6 logits, got {}", alphas.len())));
    }
    if alphas.iter().any(|a| !a.is_finite()) {
        return Err(Error::InvalidValue(format!(
            "non-finite architecture logits {alphas:?}"
        )));
    }
    let m = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut g = [0.0; 6];
    for (gi, &a) in g.iter_mut().zip(alphas) {
        *gi = (a - m).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    Ok(g)
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax_logits(alphas: &[f64]) -> usize {
    let mut best = 0;
    for (i, &a) in alphas.iter().enumerate() {
        if a > alphas[best] {
            best = i;
        }
    }
    best
}

/// One operator choice per backbone block.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Genotype {
    pub choices: Vec<CandidateKind>,
}

impl Genotype {
    pub fn new(choices: Vec<CandidateKind>) -> Self {
        Self { choices }
    }

    pub fn uniform(kind: CandidateKind, blocks: usize) -> Self {
        Self::new(vec![kind; blocks])
    }

    pub fn len(&self) -> usize {
        self.choices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.choices.is_empty()
    }

    /// Named presets: the architectures reported for the anchor, mid-level and
    /// small-and-hard branches.
    pub fn preset(name: &str) -> Option<Self> {
        use CandidateKind::*;
        let choices = match name {
            "paper-anchor" => vec![K2d3, K2d5, K2d3, K3d5],
            "paper-mid" => vec![K2d3, P3d5, K2d3, P3d5],
            "paper-sh" => vec![K2d3, K3d5, K2d3, K3d5],
            _ => return None,
        };
        Some(Self::new(choices))
    }

    pub const PRESETS: [&'static str; 3] = ["paper-anchor", "paper-mid", "paper-sh"];

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

impl std::fmt::Display for Genotype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<_> = self.choices.iter().map(|k| k.name()).collect();
        write!(f, "[{}]", names.join(", "))
    }
}

/// A block whose operator is a softmax mixture of all six candidates.
///
/// With more than one convolution per block every layer mixes its own six
/// candidates, but all layers share the block's logits.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedBlock<T> {
    pub alphas: Param<T>,
    /// `layers[l][k]` is candidate `k` (search-space order) of layer `l`.
    pub layers: Vec<Vec<CandidateOp<T>>>,
}

pub struct RelaxedCache<T> {
    gammas: [f64; 6],
    /// Per layer: per-candidate caches and outputs.
    layers: Vec<(Vec<CandidateCache<T>>, Vec<Tensor<T>>)>,
}

impl<T: Real> RelaxedBlock<T> {
    /// Logits start at zero (uniform mixture).
    pub fn new(in_channels: usize, out_channels: usize, convs: usize, rng: &mut impl Rng) -> Self {
        let layers = (0..convs)
            .map(|l| {
                let cin = if l == 0 { in_channels } else { out_channels };
                CandidateKind::ALL
                    .iter()
                    .map(|&k| CandidateOp::new(k, cin, out_channels, rng))
                    .collect()
            })
            .collect();
        Self {
            alphas: Param::zeros(6),
            layers,
        }
    }

    pub fn alphas_f64(&self) -> Vec<f64> {
        self.alphas.value.iter().map(|a| a.f64()).collect()
    }

    pub fn gammas(&self) -> Result<[f64; 6]> {
        relax_weights(&self.alphas_f64())
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, RelaxedCache<T>)> {
        let gammas = self.gammas()?;
        let mut cache = RelaxedCache {
            gammas,
            layers: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let mut caches = Vec::with_capacity(6);
            let mut outs = Vec::with_capacity(6);
            let mut mixed: Option<Tensor<T>> = None;
            for (op, &g) in layer.iter_mut().zip(&gammas) {
                let (y, c) = op.forward(&cur, mode)?;
                match &mut mixed {
                    Some(m) => m.scaled_add_assign(T::of(g), &y),
                    None => {
                        let mut m = y.clone();
                        m.scale(T::of(g));
                        mixed = Some(m);
                    }
                }
                caches.push(c);
                outs.push(y);
            }
            cache.layers.push((caches, outs));
            cur = mixed.expect("six candidates");
        }
        Ok((cur, cache))
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let gammas = self.gammas()?;
        let mut cur = x.clone();
        for layer in &self.layers {
            let mut mixed: Option<Tensor<T>> = None;
            for (op, &g) in layer.iter().zip(&gammas) {
                let y = op.infer(&cur)?;
                match &mut mixed {
                    Some(m) => m.scaled_add_assign(T::of(g), &y),
                    None => {
                        let mut m = y;
                        m.scale(T::of(g));
                        mixed = Some(m);
                    }
                }
            }
            cur = mixed.expect("six candidates");
        }
        Ok(cur)
    }

    /// Accumulates operator-weight and logit gradients; returns the input gradient.
    pub fn backward(&mut self, cache: &RelaxedCache<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let gammas = cache.gammas;
        let mut d_gamma = [0.0f64; 6];
        let mut g = dy.clone();
        for (layer, (caches, outs)) in self.layers.iter_mut().zip(&cache.layers).rev() {
            let mut d_in: Option<Tensor<T>> = None;
            for k in 0..6 {
                d_gamma[k] += crate::nn::real::dot(g.data(), outs[k].data()).f64();
                let mut gk = g.clone();
                gk.scale(T::of(gammas[k]));
                let dx = layer[k].backward(&caches[k], &gk)?;
                match &mut d_in {
                    Some(d) => d.add_assign(&dx),
                    None => d_in = Some(dx),
                }
            }
            g = d_in.expect("six candidates");
        }
        let s: f64 = (0..6).map(|k| gammas[k] * d_gamma[k]).sum();
        for j in 0..6 {
            self.alphas.grad[j] += T::of(gammas[j] * (d_gamma[j] - s));
        }
        Ok(g)
    }

    /// The candidate of the given kind from every layer, weights included.
    pub fn extract(&self, kind: CandidateKind) -> Vec<CandidateOp<T>> {
        self.layers.iter().map(|l| l[kind.index()].clone()).collect()
    }

    pub fn choice(&self) -> CandidateKind {
        CandidateKind::ALL[argmax_logits(&self.alphas_f64())]
    }
}

impl<T: Real> Parameterized<T> for RelaxedBlock<T> {
    fn visit_params(&mut self, group: ParamGroup, f: &mut dyn FnMut(&mut Param<T>)) {
        if group.includes_architecture() {
            f(&mut self.alphas);
        }
        for op in self.layers.iter_mut().flatten() {
            op.visit_params(group, f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for op in self.layers.iter_mut().flatten() {
            op.visit_buffers(f);
        }
    }
}

/// Per-block argmax of the architecture logits.
pub fn discretize<T: Real>(blocks: &[&RelaxedBlock<T>]) -> Genotype {
    Genotype::new(blocks.iter().map(|b| b.choice()).collect())
}

/// Genotype of a backbone: relaxed blocks are discretized, fixed blocks keep their kind.
pub fn discretize_backbone<T: Real>(net: &Backbone<T>) -> Genotype {
    Genotype::new(
        net.blocks
            .iter()
            .map(|b| match &b.ops {
                BlockOps::Relaxed(rb) => rb.choice(),
                BlockOps::Fixed(l) => l[0].kind(),
            })
            .collect(),
    )
}

/// Two-phase search schedule: weights only for `warmup_epochs`, then weights and
/// logits for `joint_epochs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSchedule {
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    /// Training : validation split, e.g. `[2, 1]`.
    pub train_val_ratio: [usize; 2],
    pub batch_size: usize,
    pub lr_anchor_mid: f64,
    pub lr_sh: f64,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            joint_epochs: 30,
            train_val_ratio: [2, 1],
            batch_size: 2,
            lr_anchor_mid: 0.005,
            lr_sh: 0.001,
        }
    }
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.joint_epochs == 0
            || self.batch_size == 0
            || self.train_val_ratio.contains(&0)
            || !(self.lr_anchor_mid > 0.0 && self.lr_sh > 0.0)
        {
            return config_err(format!("search schedule values must be positive: {self:?}"));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.joint_epochs
    }

    /// Split `n` items into training and validation counts by the configured ratio
    /// (at least one of each when `n >= 2`).
    pub fn split(&self, n: usize) -> (usize, usize) {
        let [a, b] = self.train_val_ratio;
        let mut train = (n * a + (a + b) / 2) / (a + b);
        if n >= 2 {
            train = train.clamp(1, n - 1);
        }
        (train, n - train)
    }
}

/// Super-network plus its two optimizers.
pub struct SearchState<T> {
    pub net: Backbone<T>,
    pub loss: LossKind,
    pub weight_opt: Optimizer,
    pub arch_opt: Optimizer,
}

impl<T: Real> SearchState<T> {
    /// Weights and logits use the same optimizer family and learning rate.
    pub fn new(net: Backbone<T>, loss: LossKind, optimizer: OptimizerSpec, lr: f64) -> Result<Self> {
        if !net.is_relaxed() {
            return config_err("architecture search needs a relaxed backbone");
        }
        Ok(Self {
            net,
            loss,
            weight_opt: Optimizer::new(optimizer, lr, ParamGroup::Weights),
            arch_opt: Optimizer::new(optimizer, lr, ParamGroup::Architecture),
        })
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.net.relaxed_blocks().iter().map(|b| b.alphas_f64()).collect()
    }

    pub fn genotype(&self) -> Genotype {
        discretize_backbone(&self.net)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub train: f64,
    pub val: Option<f64>,
}

/// One alternating update: a weight step on `train`, then (after warm-up) a logit
/// step on `val`.
pub fn bilevel_step<T: Real>(
    state: &mut SearchState<T>,
    train: &Batch<T>,
    val: &Batch<T>,
    epoch: usize,
    schedule: &SearchSchedule,
) -> Result<StepLosses> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    state.net.zero_grad();
    let (train_loss, _) = supervised_step(&mut state.net, train, state.loss, Mode::Train)?;
    state.weight_opt.step(&mut state.net);
    let mut val_loss = None;
    if epoch >= schedule.warmup_epochs {
        state.net.zero_grad();
        let (l, _) = supervised_step(&mut state.net, val, state.loss, Mode::Train)?;
        state.arch_opt.step(&mut state.net);
        val_loss = Some(l);
    }
    state.net.zero_grad();
    Ok(StepLosses {
        train: train_loss,
        val: val_loss,
    })
}

/// One row of the logit trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub epoch: usize,
    pub block: usize,
    pub alphas: [f64; 6],
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub genotype: Genotype,
    pub alpha_log: Vec<AlphaRecord>,
    pub epoch_losses: Vec<f64>,
}

/// Full two-phase search over single-item samples split into training/validation sets.
pub fn run_search<T: Real>(
    state: &mut SearchState<T>,
    train: &[Batch<T>],
    val: &[Batch<T>],
    schedule: &SearchSchedule,
    rng: &mut impl Rng,
) -> Result<SearchOutcome> {
    schedule.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut alpha_log = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut val_order: Vec<usize> = (0..val.len()).collect();
    for epoch in 0..schedule.total_epochs() {
        order.shuffle(rng);
        val_order.shuffle(rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, chunk) in order.chunks(schedule.batch_size).enumerate() {
            let tb = Batch::collate(&chunk.iter().map(|&i| train[i].clone()).collect::<Vec<_>>())?;
            let vb_items: Vec<_> = (0..chunk.len())
                .map(|j| val[val_order[(step * schedule.batch_size + j) % val.len()]].clone())
                .collect();
            let vb = Batch::collate(&vb_items)?;
            let l = bilevel_step(state, &tb, &vb, epoch, schedule)?;
            total += l.train;
            steps += 1;
        }
        epoch_losses.push(total / steps as f64);
        for (block, a) in state.alphas().into_iter().enumerate() {
            alpha_log.push(AlphaRecord {
                epoch,
                block,
                alphas: a.try_into().expect("six logits"),
            });
        }
    }
    Ok(SearchOutcome {
        genotype: state.genotype(),
        alpha_log,
        epoch_losses,
    })
}

/// Write the logit trajectory as CSV: `epoch,block,alpha_1..alpha_6`.
pub fn write_alpha_csv(records: &[AlphaRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "epoch", "block", "alpha_1", "alpha_2", "alpha_3", "alpha_4", "alpha_5", "alpha_6",
    ])?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), r.block.to_string()];
        row.extend(r.alphas.iter().map(|a| format!("{a:.9}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
