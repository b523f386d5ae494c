//! Three-stage training: anchor alone, then the downstream branches on a frozen
//! anchor, then everything jointly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{detect_sh, forward_anchor, BranchRole, Pipeline};
use crate::data::{augment_random, make_heatmap_labels, sample_vois, SamplingSpec};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{one_hot, voi_around_point, Crop, HeatMapSet, LabelMap, ProbMaps, Stratum, Voi, Volume};
use crate::nn::loss::softmax_backward;
use crate::nn::{Mode, Optimizer, OptimizerSpec, OptimizerState, Parameterized, Tensor};
use crate::objective::{deep_supervision, supervised_step, Batch, LossKind};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingPlan {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub batch_size: usize,
    pub lr_anchor_mid: f64,
    pub lr_sh: f64,
    pub lr_detector: f64,
    pub optimizer: OptimizerSpec,
}

impl Default for TrainingPlan {
    fn default() -> Self {
        Self {
            stage1_epochs: 50,
            stage2_epochs: 50,
            stage3_epochs: 10,
            batch_size: 12,
            lr_anchor_mid: 0.01,
            lr_sh: 0.005,
            lr_detector: 0.01,
            optimizer: OptimizerSpec::default(),
        }
    }
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.stage3_epochs == 0 || self.batch_size == 0 {
            return config_err("epoch counts and batch size must be positive");
        }
        if !(self.lr_anchor_mid > 0.0 && self.lr_sh > 0.0 && self.lr_detector > 0.0) {
            return config_err("learning rates must be positive");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs + self.stage3_epochs
    }

    /// Stage (1, 2 or 3) of a zero-based global epoch.
    pub fn stage_of(&self, epoch: usize) -> u8 {
        if epoch < self.stage1_epochs {
            1
        } else if epoch < self.stage1_epochs + self.stage2_epochs {
            2
        } else {
            3
        }
    }
}

/// A preprocessed scan with its full label map.
#[derive(Debug, Clone)]
pub struct TrainingCase {
    pub volume: Volume,
    pub labels: LabelMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub sampling: SamplingSpec,
    /// Random rescaling of each case every epoch.
    pub augment: bool,
    /// Maximum per-axis offset of small-organ training crops from the true center.
    pub sh_jitter_voxels: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            sampling: SamplingSpec::default(),
            augment: true,
            sh_jitter_voxels: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: u8,
    pub branch: String,
    pub loss: f64,
}

/// Everything besides the network weights needed to resume training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub optimizers: Vec<OptimizerState>,
    pub log: Vec<LogRow>,
}

pub struct Trainer {
    pub pipeline: Pipeline,
    pub plan: TrainingPlan,
    pub opts: TrainOptions,
    /// Next global epoch to run.
    pub epoch: usize,
    pub log: Vec<LogRow>,
    optimizers: Vec<Optimizer>,
}

fn role_index(role: BranchRole) -> usize {
    BranchRole::ALL.iter().position(|&r| r == role).expect("listed")
}

/// `[CT, conditioning maps]` along channels.
pub fn conditioned_input(x: &Volume, cond: &ProbMaps) -> Result<Tensor<f32>> {
    if x.shape() != cond.shape() {
        return shape_err(format!("volume {:?} and maps {:?} differ", x.shape(), cond.shape()));
    }
    Tensor::concat_channels(&[&x.to_tensor(), &cond.to_tensor()])
}

fn heat_tensor(h: &HeatMapSet) -> Tensor<f32> {
    let s = h.shape();
    Tensor::from_vec([1, h.channels(), s[0], s[1], s[2]], h.data.iter().copied().collect()).expect("shape matches")
}

/// Shuffle single-item samples and group them into batches of equal spatial shape.
pub fn make_batches(samples: Vec<Batch<f32>>, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Batch<f32>>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut buckets: Vec<([usize; 3], Vec<usize>)> = Vec::new();
    for i in order {
        let s = samples[i].input.spatial();
        match buckets.iter_mut().find(|(k, _)| *k == s) {
            Some((_, v)) => v.push(i),
            None => buckets.push((s, vec![i])),
        }
    }
    let mut out = Vec::new();
    for (_, idx) in buckets {
        for chunk in idx.chunks(batch_size.max(1)) {
            let items: Vec<_> = chunk.iter().map(|&i| samples[i].clone()).collect();
            out.push(Batch::collate(&items)?);
        }
    }
    Ok(out)
}

/// Single-item samples for searching one branch's architecture, all of one spatial
/// shape. Upstream inputs are teacher-forced: mid-level VOIs see the true anchor
/// one-hot maps and small-organ crops the true heat maps. The detector is not
/// searched; it reuses the small-organ architecture.
pub fn search_samples(
    pipeline: &Pipeline,
    role: BranchRole,
    cases: &[TrainingCase],
    sampling: &SamplingSpec,
    seed: u64,
) -> Result<Vec<Batch<f32>>> {
    let cat = &pipeline.catalog;
    let multiple = |size: [usize; 3]| pipeline.anchor.net.spec().shape_multiple(size);
    let target = |labels: &LabelMap, s: Stratum| one_hot(&cat.stratum_labels(labels, s)).to_tensor::<f32>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    match role {
        BranchRole::Detector => {
            return config_err("the detector reuses the small-organ architecture; search sh instead")
        }
        BranchRole::Anchor | BranchRole::Mid => {
            for c in cases {
                let anchor = one_hot(&cat.stratum_labels(&c.labels, Stratum::Anchor));
                for (voi, _) in sample_vois(&c.labels, sampling, rng.gen())? {
                    let voi = voi.snapped(multiple(voi.size))?;
                    let x = c.volume.crop(&voi)?;
                    let lab = c.labels.crop(&voi)?;
                    out.push(if role == BranchRole::Anchor {
                        Batch::new(x.to_tensor(), target(&lab, Stratum::Anchor))?
                    } else {
                        Batch::new(conditioned_input(&x, &anchor.crop(&voi)?)?, target(&lab, Stratum::Mid))?
                    });
                }
            }
        }
        BranchRole::ShSeg => {
            // one crop size for every channel so the samples can be batched together
            let mut extent = [0.0f64; 3];
            for e in cat.stratum(Stratum::Sh) {
                (0..3).for_each(|a| extent[a] = extent[a].max(e.max_extent_mm[a]));
            }
            for c in cases {
                let heat = make_heatmap_labels(&c.labels, cat, pipeline.spec.heat_sigma_mm);
                for ch in cat.heat_channels() {
                    let Some(center) = crate::model::center_of_mass(c.labels.data.view(), |v| ch.organs.contains(v))
                    else {
                        continue;
                    };
                    let voi = voi_around_point(
                        center,
                        extent,
                        c.labels.spacing,
                        pipeline.spec.crop_factor,
                        c.labels.shape(),
                    );
                    let voi = voi.snapped(multiple(voi.size))?;
                    let input =
                        Tensor::concat_channels(&[&c.volume.crop(&voi)?.to_tensor(), &heat_tensor(&heat.crop(&voi)?)])?;
                    out.push(Batch::new(input, target(&c.labels.crop(&voi)?, Stratum::Sh))?);
                }
            }
        }
    }
    let first = out.first().map(|b| b.input.spatial());
    if out.iter().any(|b| Some(b.input.spatial()) != first) {
        return shape_err("search samples differ in shape; use volumes at least as large as the VOI size");
    }
    Ok(out)
}

/// One pass over `batches`; returns the sample-weighted mean loss.
fn fit(
    net: &mut crate::backbone::Backbone<f32>,
    opt: &mut Optimizer,
    batches: &[Batch<f32>],
    loss: LossKind,
) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for b in batches {
        net.zero_grad();
        let (l, _) = supervised_step(net, b, loss, Mode::Train)?;
        opt.step(net);
        total += l * b.len() as f64;
        n += b.len();
    }
    net.zero_grad();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(total / n as f64)
}

struct EpochCase {
    volume: Volume,
    labels: LabelMap,
    heat: HeatMapSet,
}

impl Trainer {
    pub fn new(pipeline: Pipeline, plan: TrainingPlan, opts: TrainOptions) -> Result<Self> {
        plan.validate()?;
        opts.sampling.validate()?;
        let optimizers = BranchRole::ALL
            .iter()
            .map(|&r| {
                Optimizer::new(
                    plan.optimizer,
                    pipeline.branch(r).config.lr,
                    crate::nn::ParamGroup::Weights,
                )
            })
            .collect();
        Ok(Self {
            pipeline,
            plan,
            opts,
            epoch: 0,
            log: Vec::new(),
            optimizers,
        })
    }

    /// Rebuild a trainer from restored weights and a saved state.
    pub fn resume(pipeline: Pipeline, plan: TrainingPlan, opts: TrainOptions, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(pipeline, plan, opts)?;
        if state.optimizers.len() != t.optimizers.len() {
            return config_err(format!(
                "{} optimizer states for {} branches",
                state.optimizers.len(),
                t.optimizers.len()
            ));
        }
        for (o, s) in t.optimizers.iter_mut().zip(state.optimizers) {
            o.state = s;
        }
        t.epoch = state.epoch;
        t.log = state.log;
        Ok(t)
    }

    pub fn state(&self) -> TrainerState {
        TrainerState {
            epoch: self.epoch,
            optimizers: self.optimizers.iter().map(|o| o.state.clone()).collect(),
            log: self.log.clone(),
        }
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.plan.total_epochs()
    }

    fn check_cases(&self, cases: &[TrainingCase]) -> Result<()> {
        if cases.is_empty() {
            return config_err("no training cases");
        }
        let cat = &self.pipeline.catalog;
        for c in cases {
            if c.volume.shape() != c.labels.shape() {
                return shape_err(format!(
                    "volume {:?} vs labels {:?}",
                    c.volume.shape(),
                    c.labels.shape()
                ));
            }
            cat.check_labels(&c.labels)?;
        }
        for s in Stratum::ALL {
            let ids = cat.stratum_ids(s);
            let present = cases.iter().any(|c| c.labels.data.iter().any(|v| ids.contains(v)));
            if !present {
                return config_err(format!("no training case has {s} labels"));
            }
        }
        Ok(())
    }

    fn epoch_cases(&self, cases: &[TrainingCase], rng: &mut ChaCha8Rng) -> Result<Vec<EpochCase>> {
        let sigma = self.pipeline.spec.heat_sigma_mm;
        cases
            .iter()
            .map(|c| {
                let (volume, labels) = if self.opts.augment {
                    augment_random(&c.volume, &c.labels, &self.opts.sampling, rng.gen())?
                } else {
                    (c.volume.clone(), c.labels.clone())
                };
                let heat = make_heatmap_labels(&labels, &self.pipeline.catalog, sigma);
                Ok(EpochCase { volume, labels, heat })
            })
            .collect()
    }

    fn vois(&self, case: &EpochCase, rng: &mut ChaCha8Rng) -> Result<Vec<Voi>> {
        let spec = self.pipeline.anchor.net.spec();
        sample_vois(&case.labels, &self.opts.sampling, rng.gen())?
            .into_iter()
            .map(|(v, _)| v.snapped(spec.shape_multiple(v.size)))
            .collect()
    }

    fn stratum_target(&self, labels: &LabelMap, s: Stratum) -> Tensor<f32> {
        one_hot(&self.pipeline.catalog.stratum_labels(labels, s)).to_tensor()
    }

    /// Small-organ crops around the true (jittered) center of each present channel,
    /// or around the given detections.
    fn sh_samples(&self, case: &EpochCase, heat: &HeatMapSet, centers: Vec<Voi>) -> Result<Vec<Batch<f32>>> {
        centers
            .into_iter()
            .map(|voi| {
                let x = case.volume.crop(&voi)?;
                let input = Tensor::concat_channels(&[&x.to_tensor(), &heat_tensor(&heat.crop(&voi)?)])?;
                let target = self.stratum_target(&case.labels.crop(&voi)?, Stratum::Sh);
                Batch::new(input, target)
            })
            .collect()
    }

    fn true_sh_vois(&self, case: &EpochCase, rng: &mut ChaCha8Rng) -> Result<Vec<Voi>> {
        let cat = &self.pipeline.catalog;
        let shape = case.labels.shape();
        let j = self.opts.sh_jitter_voxels as i64;
        let mut out = Vec::new();
        for ch in cat.heat_channels() {
            let Some(c) = crate::model::center_of_mass(case.labels.data.view(), |v| ch.organs.contains(v)) else {
                continue;
            };
            let c = [0, 1, 2].map(|a| (c[a] as i64 + rng.gen_range(-j..=j)).clamp(0, shape[a] as i64 - 1) as usize);
            let mut extent = [0.0f64; 3];
            for id in &ch.organs {
                let e = cat.get(*id).expect("catalog organ").max_extent_mm;
                (0..3).for_each(|a| extent[a] = extent[a].max(e[a]));
            }
            let voi = voi_around_point(c, extent, case.labels.spacing, self.pipeline.spec.crop_factor, shape);
            out.push(voi.snapped(self.pipeline.sh.net.spec().shape_multiple(voi.size))?);
        }
        Ok(out)
    }

    fn record(&mut self, stage: u8, role: BranchRole, loss: f64) -> LogRow {
        let row = LogRow {
            epoch: self.epoch,
            stage,
            branch: role.name().into(),
            loss,
        };
        log::info!("epoch {} stage {} {}: loss {:.6}", row.epoch, stage, row.branch, loss);
        self.log.push(row.clone());
        row
    }

    fn fit_role(&mut self, role: BranchRole, batches: &[Batch<f32>]) -> Result<f64> {
        let loss = self.pipeline.branch(role).config.loss;
        let i = role_index(role);
        let net = &mut self.pipeline.branch_mut(role).net;
        fit(net, &mut self.optimizers[i], batches, loss)
    }

    /// Run the next epoch and return its log rows.
    pub fn run_epoch(&mut self, cases: &[TrainingCase]) -> Result<Vec<LogRow>> {
        if self.is_done() {
            return config_err("training plan already finished");
        }
        self.check_cases(cases)?;
        let stage = self.plan.stage_of(self.epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            self.opts.seed,
            seed::stream::TRAIN_EPOCH + self.epoch as u64,
        ));
        let ecases = self.epoch_cases(cases, &mut rng)?;
        let bs = self.plan.batch_size;
        let mut rows = Vec::new();
        match stage {
            1 => {
                let mut samples = Vec::new();
                for c in &ecases {
                    for voi in self.vois(c, &mut rng)? {
                        let input = c.volume.crop(&voi)?.to_tensor();
                        let target = self.stratum_target(&c.labels.crop(&voi)?, Stratum::Anchor);
                        samples.push(Batch::new(input, target)?);
                    }
                }
                let batches = make_batches(samples, bs, &mut rng)?;
                let l = self.fit_role(BranchRole::Anchor, &batches)?;
                rows.push(self.record(stage, BranchRole::Anchor, l));
            }
            2 => {
                let (mut mid, mut det, mut sh) = (Vec::new(), Vec::new(), Vec::new());
                for c in &ecases {
                    let anchor = forward_anchor(&self.pipeline.anchor.net, &c.volume, &self.pipeline.spec.sliding)?;
                    for voi in self.vois(c, &mut rng)? {
                        let input = conditioned_input(&c.volume.crop(&voi)?, &anchor.crop(&voi)?)?;
                        let lab = c.labels.crop(&voi)?;
                        mid.push(Batch::new(input.clone(), self.stratum_target(&lab, Stratum::Mid))?);
                        det.push(Batch::new(input, heat_tensor(&c.heat.crop(&voi)?))?);
                    }
                    let vois = self.true_sh_vois(c, &mut rng)?;
                    sh.extend(self.sh_samples(c, &c.heat, vois)?);
                }
                for (role, samples) in [
                    (BranchRole::Mid, mid),
                    (BranchRole::Detector, det),
                    (BranchRole::ShSeg, sh),
                ] {
                    if samples.is_empty() {
                        continue;
                    }
                    let batches = make_batches(samples, bs, &mut rng)?;
                    let l = self.fit_role(role, &batches)?;
                    rows.push(self.record(stage, role, l));
                }
            }
            _ => {
                let mut joint = Vec::new();
                for c in &ecases {
                    for voi in self.vois(c, &mut rng)? {
                        let lab = c.labels.crop(&voi)?;
                        let target = Tensor::concat_channels(&[
                            &self.stratum_target(&lab, Stratum::Anchor),
                            &self.stratum_target(&lab, Stratum::Mid),
                            &heat_tensor(&c.heat.crop(&voi)?),
                        ])?;
                        joint.push(Batch::new(c.volume.crop(&voi)?.to_tensor(), target)?);
                    }
                }
                let batches = make_batches(joint, bs, &mut rng)?;
                let losses = self.joint_pass(&batches)?;
                for (role, l) in [BranchRole::Anchor, BranchRole::Mid, BranchRole::Detector]
                    .into_iter()
                    .zip(losses)
                {
                    rows.push(self.record(stage, role, l));
                }
                // crops come from the current detector and are constants for this epoch
                let mut sh = Vec::new();
                for c in &ecases {
                    let anchor = forward_anchor(&self.pipeline.anchor.net, &c.volume, &self.pipeline.spec.sliding)?;
                    let (heat, dets) = detect_sh(
                        &self.pipeline.detector.net,
                        &c.volume,
                        &anchor,
                        &self.pipeline.catalog,
                        &self.pipeline.spec,
                    )?;
                    let vois = dets
                        .iter()
                        .map(|d| self.pipeline.sh_crop(d))
                        .collect::<Result<Vec<_>>>()?;
                    sh.extend(self.sh_samples(c, &heat, vois)?);
                }
                let batches = make_batches(sh, bs, &mut rng)?;
                let l = self.fit_role(BranchRole::ShSeg, &batches)?;
                rows.push(self.record(stage, BranchRole::ShSeg, l));
            }
        }
        self.epoch += 1;
        Ok(rows)
    }

    /// End-to-end step over anchor, mid and detector: the downstream losses reach the
    /// anchor through its softmax output.
    fn joint_pass(&mut self, batches: &[Batch<f32>]) -> Result<[f64; 3]> {
        let cat = &self.pipeline.catalog;
        let na = cat.stratum(Stratum::Anchor).len() + 1;
        let nm = cat.stratum(Stratum::Mid).len() + 1;
        let nh = cat.heat_channels().len();
        let mut totals = [0.0; 3];
        let mut n = 0usize;
        let p = &mut self.pipeline;
        for b in batches {
            p.anchor.net.zero_grad();
            p.mid.net.zero_grad();
            p.detector.net.zero_grad();
            let t = b.target.split_channels(&[na, nm, nh])?;
            let (out, tape) = p.anchor.net.forward(&b.input, Mode::Train)?;
            let (la, mut grads) = deep_supervision(&out, &t[0], LossKind::Dice)?;
            let probs = out.final_probs();
            let cond = Tensor::concat_channels(&[&b.input, &probs])?;
            let (lm, dm) = supervised_step(
                &mut p.mid.net,
                &Batch::new(cond.clone(), t[1].clone())?,
                LossKind::Dice,
                Mode::Train,
            )?;
            let (ld, dd) = supervised_step(
                &mut p.detector.net,
                &Batch::new(cond, t[2].clone())?,
                LossKind::L2,
                Mode::Train,
            )?;
            let mut dprobs = dm.split_channels(&[1, na])?.pop().expect("two parts");
            dprobs.add_assign(&dd.split_channels(&[1, na])?[1]);
            let dlogits = softmax_backward(&probs, &dprobs);
            grads
                .last_mut()
                .and_then(|g| g.as_mut())
                .expect("final output is supervised")
                .add_assign(&dlogits);
            p.anchor.net.backward(&tape, &grads)?;
            self.optimizers[role_index(BranchRole::Anchor)].step(&mut p.anchor.net);
            self.optimizers[role_index(BranchRole::Mid)].step(&mut p.mid.net);
            self.optimizers[role_index(BranchRole::Detector)].step(&mut p.detector.net);
            for (tot, l) in totals.iter_mut().zip([la, lm, ld]) {
                *tot += l * b.len() as f64;
            }
            n += b.len();
        }
        p.anchor.net.zero_grad();
        p.mid.net.zero_grad();
        p.detector.net.zero_grad();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok(totals.map(|t| t / n as f64))
    }

    /// Run all remaining epochs, calling `on_epoch` after each.
    pub fn run(&mut self, cases: &[TrainingCase], mut on_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(cases)?;
            on_epoch(self)?;
        }
        Ok(())
    }
}

/// Write the training log as CSV: `epoch,stage,branch,loss`.
pub fn write_log_csv(rows: &[LogRow], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "stage", "branch", "loss"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.stage.to_string(),
            r.branch.clone(),
            format!("{:.9}", r.loss),
        ])?;
    }
    w.flush()?;
    Ok(())
}
