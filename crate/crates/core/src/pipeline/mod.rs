//! The stratified pipeline: anchor organs first, mid-level organs conditioned on
//! the anchor probabilities, and small organs by heat-map detection followed by
//! segmentation inside a crop around each detected center.

mod train;

pub use train::{
    conditioned_input, make_batches, search_samples, write_log_csv, LogRow, TrainOptions, Trainer, TrainerState,
    TrainingCase, TrainingPlan,
};

use ndarray::{Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::error::{config_err, shape_err, Result};
use crate::model::{voi_around_point, Crop, HeatMapSet, LabelMap, OarCatalog, ProbMaps, Stratum, Voi, Volume};
use crate::nas::Genotype;
use crate::nn::Tensor;
use crate::objective::LossKind;
use crate::sliding::{sliding_infer, sliding_mean, SlidingSpec};

/// The four networks of the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchRole {
    Anchor,
    Mid,
    Detector,
    ShSeg,
}

impl BranchRole {
    pub const ALL: [BranchRole; 4] = [Self::Anchor, Self::Mid, Self::Detector, Self::ShSeg];

    pub fn name(self) -> &'static str {
        match self {
            Self::Anchor => "anchor",
            Self::Mid => "mid",
            Self::Detector => "detector",
            Self::ShSeg => "sh",
        }
    }

    pub fn stratum(self) -> Stratum {
        match self {
            Self::Anchor => Stratum::Anchor,
            Self::Mid => Stratum::Mid,
            Self::Detector | Self::ShSeg => Stratum::Sh,
        }
    }
}

/// Input channels a branch must take for a catalog: CT alone for anchors, CT plus
/// the anchor probabilities (background included) for the mid and detector
/// branches, CT plus every heat-map channel for small-organ segmentation.
pub fn expected_input_channels(role: BranchRole, catalog: &OarCatalog) -> usize {
    let anchor_classes = catalog.stratum(Stratum::Anchor).len() + 1;
    match role {
        BranchRole::Anchor => 1,
        BranchRole::Mid | BranchRole::Detector => 1 + anchor_classes,
        BranchRole::ShSeg => 1 + catalog.heat_channels().len(),
    }
}

pub fn expected_output_channels(role: BranchRole, catalog: &OarCatalog) -> usize {
    match role {
        BranchRole::Detector => catalog.heat_channels().len(),
        r => catalog.stratum(r.stratum()).len() + 1,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub role: BranchRole,
    pub stratum: Stratum,
    pub input_channels: usize,
    pub backbone: BackboneSpec,
    pub loss: LossKind,
    pub lr: f64,
}

impl BranchConfig {
    /// `ops == None` gives a relaxed network for architecture search.
    pub fn new(role: BranchRole, catalog: &OarCatalog, ops: Option<Genotype>, width: f64, lr: f64) -> Result<Self> {
        let input_channels = expected_input_channels(role, catalog);
        let c = Self {
            role,
            stratum: role.stratum(),
            input_channels,
            backbone: BackboneSpec::standard(input_channels, expected_output_channels(role, catalog), ops, width),
            loss: if role == BranchRole::Detector {
                LossKind::L2
            } else {
                LossKind::Dice
            },
            lr,
        };
        c.validate(catalog)?;
        Ok(c)
    }

    pub fn validate(&self, catalog: &OarCatalog) -> Result<()> {
        self.backbone.validate()?;
        let want_in = expected_input_channels(self.role, catalog);
        if self.input_channels != want_in || self.backbone.in_channels != want_in {
            return config_err(format!(
                "{} branch takes {want_in} input channels for this catalog, configured with {}",
                self.role.name(),
                self.input_channels
            ));
        }
        let want_out = expected_output_channels(self.role, catalog);
        if self.backbone.out_channels != want_out {
            return config_err(format!(
                "{} branch emits {want_out} channels for this catalog, configured with {}",
                self.role.name(),
                self.backbone.out_channels
            ));
        }
        if self.stratum != self.role.stratum() {
            return config_err(format!(
                "{} branch belongs to the {} stratum",
                self.role.name(),
                self.role.stratum()
            ));
        }
        if catalog.stratum(self.stratum).is_empty() {
            return config_err(format!("catalog has no {} organs", self.stratum));
        }
        if !(self.lr > 0.0) {
            return config_err("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub config: BranchConfig,
    pub net: Backbone<f32>,
}

impl Branch {
    pub fn new(config: BranchConfig, rng: &mut impl Rng) -> Result<Self> {
        let net = Backbone::new(config.backbone.clone(), rng)?;
        Ok(Self { config, net })
    }
}

/// Architecture per branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchGenotypes {
    pub anchor: Genotype,
    pub mid: Genotype,
    pub detector: Genotype,
    pub sh: Genotype,
}

impl BranchGenotypes {
    /// The reference per-stratum architectures; the detector shares the small-organ one.
    pub fn presets() -> Self {
        let p = |n: &str| Genotype::preset(n).expect("bundled preset");
        Self {
            anchor: p("paper-anchor"),
            mid: p("paper-mid"),
            detector: p("paper-sh"),
            sh: p("paper-sh"),
        }
    }

    pub fn get(&self, role: BranchRole) -> &Genotype {
        match role {
            BranchRole::Anchor => &self.anchor,
            BranchRole::Mid => &self.mid,
            BranchRole::Detector => &self.detector,
            BranchRole::ShSeg => &self.sh,
        }
    }
}

/// Everything needed to rebuild an untrained pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineSpec {
    pub genotypes: BranchGenotypes,
    /// Multiplier on the 16/32/64/128 block widths.
    pub width: f64,
    pub sliding: SlidingSpec,
    pub heat_sigma_mm: f64,
    /// Small-organ crop size as a multiple of the organ's largest extent.
    pub crop_factor: f64,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        Self {
            genotypes: BranchGenotypes::presets(),
            width: 1.0,
            sliding: SlidingSpec::default(),
            heat_sigma_mm: crate::data::DEFAULT_SIGMA_MM,
            crop_factor: 3.0,
        }
    }
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<()> {
        self.sliding.validate()?;
        if !(self.width > 0.0 && self.heat_sigma_mm > 0.0 && self.crop_factor > 0.0) {
            return config_err("width, heat-map sigma and crop factor must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub catalog: OarCatalog,
    pub spec: PipelineSpec,
    pub anchor: Branch,
    pub mid: Branch,
    pub detector: Branch,
    pub sh: Branch,
}

impl Pipeline {
    pub fn new(catalog: OarCatalog, spec: PipelineSpec, plan: &TrainingPlan, rng: &mut impl Rng) -> Result<Self> {
        catalog.validate()?;
        spec.validate()?;
        let mut build = |role: BranchRole| -> Result<Branch> {
            let lr = match role {
                BranchRole::Anchor | BranchRole::Mid => plan.lr_anchor_mid,
                BranchRole::Detector => plan.lr_detector,
                BranchRole::ShSeg => plan.lr_sh,
            };
            let cfg = BranchConfig::new(role, &catalog, Some(spec.genotypes.get(role).clone()), spec.width, lr)?;
            Branch::new(cfg, rng)
        };
        let anchor = build(BranchRole::Anchor)?;
        let mid = build(BranchRole::Mid)?;
        let detector = build(BranchRole::Detector)?;
        let sh = build(BranchRole::ShSeg)?;
        Ok(Self {
            catalog,
            spec,
            anchor,
            mid,
            detector,
            sh,
        })
    }

    pub fn branch(&self, role: BranchRole) -> &Branch {
        match role {
            BranchRole::Anchor => &self.anchor,
            BranchRole::Mid => &self.mid,
            BranchRole::Detector => &self.detector,
            BranchRole::ShSeg => &self.sh,
        }
    }

    pub fn branch_mut(&mut self, role: BranchRole) -> &mut Branch {
        match role {
            BranchRole::Anchor => &mut self.anchor,
            BranchRole::Mid => &mut self.mid,
            BranchRole::Detector => &mut self.detector,
            BranchRole::ShSeg => &mut self.sh,
        }
    }

    /// Crop around a detected center, grown to a size the segmentation network accepts.
    pub fn sh_crop(&self, det: &DetectionResult) -> Result<Voi> {
        det.voi.snapped(self.sh.config.backbone.shape_multiple(det.voi.size))
    }

    /// Full inference on a preprocessed volume.
    pub fn infer(&self, x: &Volume) -> Result<PipelineOutput> {
        let anchor = forward_anchor(&self.anchor.net, x, &self.spec.sliding)?;
        let mid = forward_mid(&self.mid.net, x, &anchor, &self.spec.sliding)?;
        let (heat, detections) = detect_sh(&self.detector.net, x, &anchor, &self.catalog, &self.spec)?;
        let mut sh = Vec::with_capacity(detections.len());
        for det in &detections {
            let voi = self.sh_crop(det)?;
            let probs = forward_sh(&self.sh.net, &x.crop(&voi)?, &heat.crop(&voi)?)?;
            sh.push((voi, probs));
        }
        let labels = stitch_predictions(&self.catalog, &anchor, &mid, &sh)?;
        Ok(PipelineOutput {
            labels,
            anchor,
            mid,
            heat,
            detections,
            sh,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub labels: LabelMap,
    pub anchor: ProbMaps,
    pub mid: ProbMaps,
    pub heat: HeatMapSet,
    pub detections: Vec<DetectionResult>,
    pub sh: Vec<(Voi, ProbMaps)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    /// Heat-map channel name (organ, or merge group).
    pub channel: String,
    pub organs: Vec<u16>,
    pub center: [usize; 3],
    pub peak_value: f32,
    pub voi: Voi,
    /// The channel was constant, so the center is just the first voxel.
    pub degenerate: bool,
}

fn probs_of(t: &Tensor<f32>, like: &Volume) -> ProbMaps {
    ProbMaps::from_tensor(t, 0, like.spacing, like.origin)
}

fn check_aligned(x: &Volume, p: &ProbMaps) -> Result<()> {
    if x.shape() != p.shape() {
        return shape_err(format!(
            "volume {:?} and conditioning maps {:?} differ",
            x.shape(),
            p.shape()
        ));
    }
    Ok(())
}

/// Anchor-organ probabilities (background first) for a preprocessed volume.
pub fn forward_anchor(net: &Backbone<f32>, x: &Volume, sliding: &SlidingSpec) -> Result<ProbMaps> {
    net.spec().check_input(sliding.window)?;
    let out = sliding_infer(net, &x.to_tensor(), sliding)?;
    Ok(probs_of(&out.probs, x))
}

/// Mid-level probabilities from the CT and the anchor probabilities.
pub fn forward_mid(net: &Backbone<f32>, x: &Volume, anchor_pred: &ProbMaps, sliding: &SlidingSpec) -> Result<ProbMaps> {
    check_aligned(x, anchor_pred)?;
    let input = Tensor::concat_channels(&[&x.to_tensor(), &anchor_pred.to_tensor()])?;
    let out = sliding_infer(net, &input, sliding)?;
    Ok(probs_of(&out.probs, x))
}

/// Regressed heat maps and one detection per heat channel.
pub fn detect_sh(
    net: &Backbone<f32>,
    x: &Volume,
    anchor_pred: &ProbMaps,
    catalog: &OarCatalog,
    spec: &PipelineSpec,
) -> Result<(HeatMapSet, Vec<DetectionResult>)> {
    check_aligned(x, anchor_pred)?;
    let input = Tensor::concat_channels(&[&x.to_tensor(), &anchor_pred.to_tensor()])?;
    let raw = |w: &Tensor<f32>| Ok(net.infer(w)?.final_logits().clone());
    let out = sliding_mean(&raw, &input, &spec.sliding, false)?;
    let s = x.shape();
    let heat = HeatMapSet {
        data: ndarray::Array4::from_shape_vec((out.probs.channels(), s[0], s[1], s[2]), out.probs.into_vec())
            .expect("shape matches"),
        sigma_mm: spec.heat_sigma_mm,
        spacing: x.spacing,
        origin: x.origin,
    };
    let dets = detections_from_heat(&heat, catalog, spec.crop_factor)?;
    Ok((heat, dets))
}

/// Argmax of each heat channel and the crop around it.
pub fn detections_from_heat(heat: &HeatMapSet, catalog: &OarCatalog, crop_factor: f64) -> Result<Vec<DetectionResult>> {
    let channels = catalog.heat_channels();
    if channels.len() != heat.channels() {
        return shape_err(format!(
            "{} heat channels for {} small-organ channels",
            heat.channels(),
            channels.len()
        ));
    }
    let shape = heat.shape();
    Ok(channels
        .into_iter()
        .zip(heat.peaks())
        .enumerate()
        .map(|(c, (ch, (center, peak)))| {
            let view = heat.data.index_axis(Axis(0), c);
            let degenerate = view.iter().all(|&v| v == peak);
            if degenerate {
                log::warn!("heat channel {} is constant; using the first voxel", ch.name);
            }
            let mut extent = [0.0f64; 3];
            for id in &ch.organs {
                let e = catalog
                    .get(*id)
                    .expect("channel organs come from the catalog")
                    .max_extent_mm;
                for a in 0..3 {
                    extent[a] = extent[a].max(e[a]);
                }
            }
            DetectionResult {
                channel: ch.name,
                organs: ch.organs,
                center,
                peak_value: peak,
                voi: voi_around_point(center, extent, heat.spacing, crop_factor, shape),
                degenerate,
            }
        })
        .collect())
}

/// Small-organ probabilities inside one crop.
pub fn forward_sh(net: &Backbone<f32>, x_crop: &Volume, h_crop: &HeatMapSet) -> Result<ProbMaps> {
    if x_crop.shape() != h_crop.shape() {
        return shape_err(format!(
            "crop {:?} and heat crop {:?} differ",
            x_crop.shape(),
            h_crop.shape()
        ));
    }
    let s = h_crop.shape();
    let h = Tensor::from_vec(
        [1, h_crop.channels(), s[0], s[1], s[2]],
        h_crop.data.iter().copied().collect(),
    )?;
    let input = Tensor::concat_channels(&[&x_crop.to_tensor(), &h])?;
    let out = net.infer(&input)?;
    Ok(probs_of(&out.final_probs(), x_crop))
}

/// Probability a later stratum's foreground must exceed to replace an earlier
/// stratum's foreground.
pub const OVERRIDE_PROB: f32 = 0.5;

/// Merge the three strata into one label map in catalog ids. Within a stratum the
/// per-voxel argmax decides; across strata a later foreground replaces an earlier
/// one only when its probability exceeds [`OVERRIDE_PROB`]. Overlapping small-organ
/// crops are resolved by the most probable foreground.
pub fn stitch_predictions(
    catalog: &OarCatalog,
    anchor: &ProbMaps,
    mid: &ProbMaps,
    sh_per_voi: &[(Voi, ProbMaps)],
) -> Result<LabelMap> {
    let shape = anchor.shape();
    if mid.shape() != shape {
        return shape_err(format!("anchor maps {shape:?} and mid maps {:?} differ", mid.shape()));
    }
    let ids: Vec<Vec<u16>> = Stratum::ALL.iter().map(|&s| catalog.stratum_ids(s)).collect();
    for (maps, s) in [(anchor, 0), (mid, 1)] {
        if maps.channels() != ids[s].len() + 1 {
            return shape_err(format!(
                "{} maps have {} channels, expected {}",
                Stratum::ALL[s],
                maps.channels(),
                ids[s].len() + 1
            ));
        }
    }
    let winner = |maps: &ProbMaps, at: [usize; 3]| -> (usize, f32) {
        let mut best = (0, maps.data[[0, at[0], at[1], at[2]]]);
        for c in 1..maps.channels() {
            let p = maps.data[[c, at[0], at[1], at[2]]];
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    };
    // small-organ stratum: best foreground over all crops covering a voxel
    let mut sh_label = Array3::<u16>::zeros((shape[0], shape[1], shape[2]));
    let mut sh_prob = Array3::<f32>::zeros((shape[0], shape[1], shape[2]));
    for (voi, maps) in sh_per_voi {
        if voi.source_shape != shape || maps.shape() != voi.size || maps.channels() != ids[2].len() + 1 {
            return shape_err(format!(
                "small-organ maps {:?}x{} do not fit VOI {:?} of {:?}",
                maps.shape(),
                maps.channels(),
                voi.size,
                voi.source_shape
            ));
        }
        voi.validate()?;
        for x in 0..voi.size[0] {
            for y in 0..voi.size[1] {
                for z in 0..voi.size[2] {
                    let (c, p) = winner(maps, [x, y, z]);
                    let g = [voi.start[0] + x, voi.start[1] + y, voi.start[2] + z];
                    if c > 0 && p > sh_prob[g] {
                        sh_label[g] = ids[2][c - 1];
                        sh_prob[g] = p;
                    }
                }
            }
        }
    }
    let mut out = Array3::<u16>::zeros((shape[0], shape[1], shape[2]));
    for ((x, y, z), o) in out.indexed_iter_mut() {
        let mut label = 0u16;
        for (s, maps) in [anchor, mid].into_iter().enumerate() {
            let (c, p) = winner(maps, [x, y, z]);
            if c > 0 && (label == 0 || p > OVERRIDE_PROB) {
                label = ids[s][c - 1];
            }
        }
        let (l, p) = (sh_label[[x, y, z]], sh_prob[[x, y, z]]);
        if l > 0 && (label == 0 || p > OVERRIDE_PROB) {
            label = l;
        }
        *o = label;
    }
    LabelMap::new(out, catalog.len() as u16, anchor.spacing, anchor.origin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_heatmap_labels;
    use crate::model::{one_hot, OrganEntry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn catalog() -> OarCatalog {
        let e = |id: u16, stratum, extent: f64| OrganEntry {
            organ_id: id,
            name: format!("o{id}"),
            stratum,
            max_extent_mm: [extent; 3],
            merge_group: None,
        };
        OarCatalog::new(vec![
            e(1, Stratum::Anchor, 20.0),
            e(2, Stratum::Mid, 12.0),
            e(3, Stratum::Mid, 12.0),
            e(4, Stratum::Sh, 4.0),
        ])
        .unwrap()
    }

    fn spec() -> PipelineSpec {
        PipelineSpec {
            width: 0.125,
            sliding: SlidingSpec {
                window: [16, 16, 8],
                stride: [8, 8, 8],
            },
            ..Default::default()
        }
    }

    fn maps(c: usize, shape: [usize; 3], mut f: impl FnMut(usize, [usize; 3]) -> f32) -> ProbMaps {
        let data = ndarray::Array4::from_shape_fn((c, shape[0], shape[1], shape[2]), |(k, x, y, z)| f(k, [x, y, z]));
        ProbMaps::new(data, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn channel_arithmetic() {
        let cat = OarCatalog::reference();
        assert_eq!(expected_input_channels(BranchRole::Anchor, &cat), 1);
        assert_eq!(expected_input_channels(BranchRole::Mid, &cat), 1 + 10);
        assert_eq!(expected_input_channels(BranchRole::ShSeg, &cat), 1 + 10);
        assert_eq!(expected_output_channels(BranchRole::Detector, &cat), 10);
        let mut c = BranchConfig::new(BranchRole::Mid, &cat, None, 0.25, 0.01).unwrap();
        c.input_channels = 2;
        assert!(c.validate(&cat).is_err());
    }

    #[test]
    fn untrained_anchor_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Pipeline::new(catalog(), spec(), &TrainingPlan::default(), &mut rng).unwrap();
        let x = Volume::new(Array3::from_elem((16, 16, 8), 0.3), [1.0; 3], [0.0; 3]).unwrap();
        let a = forward_anchor(&p.anchor.net, &x, &p.spec.sliding).unwrap();
        assert!(a.data.iter().all(|&v| (v - 0.5).abs() < 1e-6));
        let m = forward_mid(
            &p.mid.net,
            &x,
            &ProbMaps::uniform(2, [16, 16, 8], [1.0; 3], [0.0; 3]),
            &p.spec.sliding,
        )
        .unwrap();
        assert_eq!(m.channels(), 3);
        assert!(m.data.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
        let bad = ProbMaps::uniform(2, [16, 16, 4], [1.0; 3], [0.0; 3]);
        assert!(forward_mid(&p.mid.net, &x, &bad, &p.spec.sliding).is_err());
        let out = p.infer(&x).unwrap();
        assert_eq!(out.labels.shape(), [16, 16, 8]);
        assert_eq!(out.detections.len(), 1);
        assert!(out.detections[0].degenerate);
    }

    #[test]
    fn label_heat_map_detects_true_center() {
        let cat = catalog();
        let mut d = Array3::<u16>::zeros((20, 20, 12));
        for x in 9..12 {
            for y in 4..7 {
                for z in 6..9 {
                    d[[x, y, z]] = 4;
                }
            }
        }
        let lab = LabelMap::new(d, 4, [0.9, 0.9, 2.0], [0.0; 3]).unwrap();
        let h = make_heatmap_labels(&lab, &cat, 8.0);
        let dets = detections_from_heat(&h, &cat, 3.0).unwrap();
        assert_eq!(dets[0].center, [10, 5, 7]);
        assert_eq!(dets[0].peak_value, 1.0);
        assert!(!dets[0].degenerate);
        // 3 x 4 mm at 0.9 mm -> 13 voxels; at 2 mm -> 6
        assert_eq!(dets[0].voi.size, [13, 13, 6]);
        dets[0].voi.validate().unwrap();
    }

    #[test]
    fn stitching_rules() {
        let cat = catalog();
        let s = [4, 1, 1];
        // anchor: voxel 0 organ 1 (0.9); mid: voxel 0 organ 2 (0.7), voxel 1 organ 3 (0.6)
        let anchor = maps(2, s, |k, p| match (k, p[0]) {
            (1, 0) => 0.9,
            (0, 0) => 0.1,
            (0, _) => 1.0,
            _ => 0.0,
        });
        let mid = maps(3, s, |k, p| match (k, p[0]) {
            (2, 0) => 0.0,
            (1, 0) => 0.7,
            (0, 0) => 0.3,
            (2, 1) => 0.6,
            (0, 1) => 0.4,
            (0, _) => 1.0,
            _ => 0.0,
        });
        // small organ: 0.9 at voxel 2 (mid background there), 0.4 vs 0.35 bg at voxel 1
        let sh = maps(2, [3, 1, 1], |k, p| match (k, p[0]) {
            (1, 0) => 0.4,
            (0, 0) => 0.35,
            (1, 1) => 0.9,
            (0, 1) => 0.1,
            (0, _) => 1.0,
            _ => 0.0,
        });
        let voi = Voi::new([1, 0, 0], [3, 1, 1], s).unwrap();
        let l = stitch_predictions(&cat, &anchor, &mid, &[(voi, sh)]).unwrap();
        // voxel 0: mid 0.7 > 0.5 overrides anchor; voxel 1: small 0.4 does not beat mid;
        // voxel 2: small 0.9 where mid is background; voxel 3: background
        assert_eq!(l.data.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4, 0]);
    }

    #[test]
    fn stitching_is_idempotent() {
        let cat = catalog();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [6, 5, 4];
        let rand_maps = |c: usize, shape: [usize; 3], rng: &mut ChaCha8Rng| {
            let mut m = maps(c, shape, |_, _| rng.gen::<f32>());
            let sum = m.data.sum_axis(Axis(0));
            for mut ch in m.data.axis_iter_mut(Axis(0)) {
                ch /= &sum;
            }
            m
        };
        let a = rand_maps(2, shape, &mut rng);
        let m = rand_maps(3, shape, &mut rng);
        let voi = Voi::new([1, 1, 0], [4, 3, 4], shape).unwrap();
        let sh = rand_maps(2, voi.size, &mut rng);
        let first = stitch_predictions(&cat, &a, &m, &[(voi, sh)]).unwrap();
        let again = stitch_predictions(
            &cat,
            &one_hot(&cat.stratum_labels(&first, Stratum::Anchor)),
            &one_hot(&cat.stratum_labels(&first, Stratum::Mid)),
            &[(Voi::whole(shape), one_hot(&cat.stratum_labels(&first, Stratum::Sh)))],
        )
        .unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn detection_translates_with_heat_map() {
        let cat = catalog();
        for shift in [[0usize, 0, 0], [3, 1, 2], [5, 7, 1]] {
            let c = [6 + shift[0], 5 + shift[1], 4 + shift[2]];
            let h = HeatMapSet {
                data: crate::data::heatmap::gaussian_map::<f32>([20, 20, 12], c.map(|v| v as f64), [1.0; 3], 3.0)
                    .insert_axis(Axis(0)),
                sigma_mm: 3.0,
                spacing: [1.0; 3],
                origin: [0.0; 3],
            };
            assert_eq!(detections_from_heat(&h, &cat, 3.0).unwrap()[0].center, c);
        }
    }

    #[test]
    fn whole_volume_crop_equals_full_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Pipeline::new(catalog(), spec(), &TrainingPlan::default(), &mut rng).unwrap();
        let x = Volume::new(
            Array3::from_shape_fn((16, 16, 8), |(a, b, c)| ((a + b * c) % 7) as f32 / 7.0),
            [1.0; 3],
            [0.0; 3],
        )
        .unwrap();
        let h = HeatMapSet {
            data: ndarray::Array4::from_elem((1, 16, 16, 8), 0.25),
            sigma_mm: 8.0,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        };
        let whole = Voi::whole(x.shape());
        let a = forward_sh(&p.sh.net, &x.crop(&whole).unwrap(), &h.crop(&whole).unwrap()).unwrap();
        let b = forward_sh(&p.sh.net, &x, &h).unwrap();
        assert_eq!(a, b);
    }
}
