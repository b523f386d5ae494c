//! Ablations on seeded phantoms: conditioning of the mid-level branch, crop-based
//! small-organ segmentation against a whole-volume baseline, and the detector with
//! and without the anchor channel.

use std::time::Instant;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stratoseg::backbone::{Backbone, BackboneSpec};
use stratoseg::data::{
    generate_phantom, make_heatmap_labels, preprocess, sample_vois, PhantomSpec, PreprocessSpec, SamplingSpec,
};
use stratoseg::metrics::{detection_distance, dsc};
use stratoseg::model::{one_hot, voi_around_point, Crop};
use stratoseg::nn::{Mode, Optimizer, OptimizerSpec, ParamGroup, Parameterized, Tensor};
use stratoseg::objective::{supervised_step, Batch, LossKind};
use stratoseg::pipeline::{
    conditioned_input, detect_sh, forward_anchor, forward_mid, forward_sh, make_batches, stitch_predictions,
};
use stratoseg::seed::{derive, stream};
use stratoseg::{
    Genotype, HeatMapSet, LabelMap, OarCatalog, Pipeline, PipelineSpec, ProbMaps, SlidingSpec, Stratum, TrainingPlan,
    Voi, Volume,
};

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub train: usize,
    pub test: usize,
    pub width: f64,
    /// Training VOI edge length in voxels.
    pub voi: usize,
    pub anchor_epochs: usize,
    /// Random VOIs per scan for the anchor branch, which must learn to reject the
    /// bright decoys.
    pub anchor_negatives: usize,
    pub epochs: usize,
    pub crop_epochs: usize,
    pub batch_size: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            train: 24,
            test: 8,
            width: 0.25,
            voi: 32,
            anchor_epochs: 10,
            anchor_negatives: 3,
            epochs: 12,
            crop_epochs: 48,
            batch_size: 4,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SeedOutcome {
    pub seed: u64,
    pub anchor_dsc: f64,
    pub mid_true_anchor: f64,
    pub mid_uniform_anchor: f64,
    pub sh_crop: f64,
    pub sh_whole: f64,
    pub detect_with_anchor_mm: f64,
    pub detect_without_anchor_mm: f64,
    pub seconds: f64,
}

struct Case {
    x: Volume,
    labels: LabelMap,
    heat: HeatMapSet,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean DSC over the organs of a stratum; `pred` holds catalog ids.
fn stratum_dsc(catalog: &OarCatalog, pred: &LabelMap, truth: &LabelMap, s: Stratum) -> f64 {
    let v: Vec<f64> = catalog
        .stratum_ids(s)
        .iter()
        .map(|&id| dsc(&pred.mask(id), &truth.mask(id)).unwrap())
        .collect();
    mean(&v)
}

/// Argmax of stratum-local maps, relabelled to catalog ids.
fn to_catalog_ids(catalog: &OarCatalog, maps: &ProbMaps, s: Stratum) -> LabelMap {
    let ids = catalog.stratum_ids(s);
    let mut l = maps.argmax();
    l.data.mapv_inplace(|v| if v == 0 { 0 } else { ids[v as usize - 1] });
    l.class_count = catalog.len() as u16;
    l
}

fn target(catalog: &OarCatalog, labels: &LabelMap, s: Stratum) -> Tensor<f32> {
    one_hot(&catalog.stratum_labels(labels, s)).to_tensor()
}

fn heat_tensor(h: &HeatMapSet) -> Tensor<f32> {
    let s = h.shape();
    Tensor::from_vec([1, h.channels(), s[0], s[1], s[2]], h.data.iter().copied().collect()).unwrap()
}

fn uniform_like(channels: usize, x: &Volume) -> ProbMaps {
    ProbMaps::uniform(channels, x.shape(), x.spacing, x.origin)
}

/// Train on a fresh sample set per epoch.
fn train(
    net: &mut Backbone<f32>,
    mut samples: impl FnMut(usize) -> Vec<Batch<f32>>,
    epochs: usize,
    lr: f64,
    loss: LossKind,
    bs: usize,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Optimizer::new(OptimizerSpec::default(), lr, ParamGroup::Weights);
    for e in 0..epochs {
        for b in make_batches(samples(e), bs, &mut rng).unwrap() {
            net.zero_grad();
            supervised_step(net, &b, loss, Mode::Train).unwrap();
            opt.step(net);
        }
    }
    net.zero_grad();
}

/// Training VOIs of one case for one epoch: a VOI on each organ of the stratum
/// plus `negatives` at random positions.
fn vois(cat: &OarCatalog, case: &Case, s: Stratum, size: usize, negatives: usize, seed: u64) -> Vec<Voi> {
    let spec = SamplingSpec {
        voi_size: [size; 3],
        negatives_per_scan: negatives,
        positive_per_organ: 1,
        scale_range: [1.0, 1.0],
    };
    sample_vois(&cat.stratum_labels(&case.labels, s), &spec, seed)
        .unwrap()
        .into_iter()
        .map(|(v, _)| v)
        .collect()
}

/// Crops of the small-organ stratum around each channel's true center, shifted by
/// up to `jitter` voxels per axis, with the given heat maps as extra input.
fn sh_training_crops(
    cat: &OarCatalog,
    sh_spec: &BackboneSpec,
    crop_factor: f64,
    case: &Case,
    heat: &HeatMapSet,
    jitter: i64,
    rng: &mut ChaCha8Rng,
) -> Vec<Batch<f32>> {
    let shape = case.labels.shape();
    let mut out = Vec::new();
    for ch in cat.heat_channels() {
        let Some(c) = case.labels.center_of_mass(ch.organs[0]) else {
            continue;
        };
        let c =
            [0, 1, 2].map(|a| (c[a] as i64 + rng.gen_range(-jitter..=jitter)).clamp(0, shape[a] as i64 - 1) as usize);
        let extent = cat.get(ch.organs[0]).unwrap().max_extent_mm;
        let voi = voi_around_point(c, extent, case.labels.spacing, crop_factor, shape);
        let voi = voi.snapped(sh_spec.shape_multiple(voi.size)).unwrap();
        let input = Tensor::concat_channels(&[
            &case.x.crop(&voi).unwrap().to_tensor(),
            &heat_tensor(&heat.crop(&voi).unwrap()),
        ])
        .unwrap();
        out.push(Batch::new(input, target(cat, &case.labels.crop(&voi).unwrap(), Stratum::Sh)).unwrap());
    }
    out
}

/// Small-organ label map from per-crop maps, using the pipeline's stitching with
/// empty anchor and mid-level maps.
fn stitch_sh(cat: &OarCatalog, like: &Volume, sh: &[(Voi, ProbMaps)]) -> LabelMap {
    let empty = |n: usize| {
        let s = like.shape();
        let mut d = Array4::<f32>::zeros((n + 1, s[0], s[1], s[2]));
        d.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        ProbMaps::new(d, like.spacing, like.origin).unwrap()
    };
    let a = empty(cat.stratum_ids(Stratum::Anchor).len());
    let m = empty(cat.stratum_ids(Stratum::Mid).len());
    stitch_predictions(cat, &a, &m, sh).unwrap()
}

pub fn run_seed(seed: u64, cfg: &StudyConfig) -> SeedOutcome {
    let started = Instant::now();
    let spec = PhantomSpec::default();
    let cat = spec.catalog();
    let pre = PreprocessSpec::default();
    let cases: Vec<Case> = (0..(cfg.train + cfg.test) as u64)
        .map(|i| {
            let ph = generate_phantom(&spec, derive(seed, stream::PHANTOM + i)).unwrap();
            let heat = make_heatmap_labels(&ph.labels, &cat, stratoseg::data::DEFAULT_SIGMA_MM);
            Case {
                x: preprocess(&ph.volume, &pre),
                labels: ph.labels,
                heat,
            }
        })
        .collect();
    let (tr, te) = cases.split_at(cfg.train);
    let n_anchor = cat.stratum_ids(Stratum::Anchor).len() + 1;
    let n_heat = cat.heat_channels().len();

    let pspec = PipelineSpec {
        width: cfg.width,
        sliding: SlidingSpec {
            window: spec.volume_shape,
            stride: spec.volume_shape.map(|v| v / 2),
        },
        ..PipelineSpec::default()
    };
    let plan = TrainingPlan::default();
    let mut init = ChaCha8Rng::seed_from_u64(derive(seed, stream::INIT));
    let mut p = Pipeline::new(cat.clone(), pspec.clone(), &plan, &mut init).unwrap();
    let build = |input: usize, output: usize, g: &Genotype, rng: &mut ChaCha8Rng| {
        Backbone::<f32>::new(BackboneSpec::standard(input, output, Some(g.clone()), cfg.width), rng).unwrap()
    };
    let g = &pspec.genotypes;
    // baselines start from the same weights as their pipeline counterparts where shapes allow
    let mut mid_uniform = p.mid.net.clone();
    let mut det_plain = build(1, n_heat, &g.detector, &mut init);
    let mut sh_whole = build(1, cat.stratum_ids(Stratum::Sh).len() + 1, &g.sh, &mut init);
    let bs = cfg.batch_size;
    let train_seed = derive(seed, stream::TRAIN_EPOCH);

    let epoch_seed = |branch: u64, e: usize, i: usize| {
        derive(seed, stream::SAMPLING + (branch << 16) + ((e as u64) << 8) + i as u64)
    };
    let size = cfg.voi;

    // anchor branch
    train(
        &mut p.anchor.net,
        |e| {
            let mut out = Vec::new();
            for (i, c) in tr.iter().enumerate() {
                for v in vois(
                    &cat,
                    c,
                    Stratum::Anchor,
                    size,
                    cfg.anchor_negatives,
                    epoch_seed(0, e, i),
                ) {
                    let input = c.x.crop(&v).unwrap().to_tensor();
                    out.push(Batch::new(input, target(&cat, &c.labels.crop(&v).unwrap(), Stratum::Anchor)).unwrap());
                }
            }
            out
        },
        cfg.anchor_epochs,
        plan.lr_anchor_mid,
        LossKind::Dice,
        bs,
        train_seed,
    );
    let anchor_pred = |c: &Case| forward_anchor(&p.anchor.net, &c.x, &pspec.sliding).unwrap();
    let anchor_dsc = mean(
        &te.iter()
            .map(|c| {
                stratum_dsc(
                    &cat,
                    &to_catalog_ids(&cat, &anchor_pred(c), Stratum::Anchor),
                    &c.labels,
                    Stratum::Anchor,
                )
            })
            .collect::<Vec<_>>(),
    );

    // mid-level branch with true vs uninformative anchor maps
    let truth = |c: &Case| one_hot(&cat.stratum_labels(&c.labels, Stratum::Anchor));
    let uniform = |c: &Case| uniform_like(n_anchor, &c.x);
    let mid_samples = |cond: &dyn Fn(&Case) -> ProbMaps, e: usize| -> Vec<Batch<f32>> {
        let mut out = Vec::new();
        for (i, c) in tr.iter().enumerate() {
            let maps = cond(c);
            for v in vois(&cat, c, Stratum::Mid, size, 1, epoch_seed(1, e, i)) {
                let input = conditioned_input(&c.x.crop(&v).unwrap(), &maps.crop(&v).unwrap()).unwrap();
                out.push(Batch::new(input, target(&cat, &c.labels.crop(&v).unwrap(), Stratum::Mid)).unwrap());
            }
        }
        out
    };
    let lr = plan.lr_anchor_mid;
    train(
        &mut p.mid.net,
        |e| mid_samples(&truth, e),
        cfg.epochs,
        lr,
        LossKind::Dice,
        bs,
        train_seed + 1,
    );
    train(
        &mut mid_uniform,
        |e| mid_samples(&uniform, e),
        cfg.epochs,
        lr,
        LossKind::Dice,
        bs,
        train_seed + 1,
    );
    let mid_dsc = |net: &Backbone<f32>, cond: &dyn Fn(&Case) -> ProbMaps| {
        mean(
            &te.iter()
                .map(|c| {
                    let m = forward_mid(net, &c.x, &cond(c), &pspec.sliding).unwrap();
                    stratum_dsc(&cat, &to_catalog_ids(&cat, &m, Stratum::Mid), &c.labels, Stratum::Mid)
                })
                .collect::<Vec<_>>(),
        )
    };
    let mid_true_anchor = mid_dsc(&p.mid.net, &truth);
    let mid_uniform_anchor = mid_dsc(&mid_uniform, &uniform);

    // detector with predicted anchor maps vs CT only, on VOIs around the small organs
    let anchors_tr: Vec<ProbMaps> = tr.iter().map(anchor_pred).collect();
    let anchors_te: Vec<ProbMaps> = te.iter().map(anchor_pred).collect();
    let det_samples = |with_anchor: bool, e: usize| -> Vec<Batch<f32>> {
        let mut out = Vec::new();
        for (i, (c, a)) in tr.iter().zip(&anchors_tr).enumerate() {
            for v in vois(&cat, c, Stratum::Sh, size, 1, epoch_seed(2, e, i)) {
                let x = c.x.crop(&v).unwrap();
                let input = if with_anchor {
                    conditioned_input(&x, &a.crop(&v).unwrap()).unwrap()
                } else {
                    x.to_tensor()
                };
                out.push(Batch::new(input, heat_tensor(&c.heat.crop(&v).unwrap())).unwrap());
            }
        }
        out
    };
    let lr = plan.lr_detector;
    train(
        &mut p.detector.net,
        |e| det_samples(true, e),
        cfg.epochs,
        lr,
        LossKind::L2,
        bs,
        train_seed + 2,
    );
    train(
        &mut det_plain,
        |e| det_samples(false, e),
        cfg.epochs,
        lr,
        LossKind::L2,
        bs,
        train_seed + 2,
    );

    let truth_centers = |c: &Case| -> Vec<[usize; 3]> {
        cat.heat_channels()
            .iter()
            .map(|ch| c.labels.center_of_mass(ch.organs[0]).unwrap())
            .collect()
    };
    let mut with_mm = Vec::new();
    let mut without_mm = Vec::new();
    let mut detections = Vec::new();
    for (c, a) in te.iter().zip(&anchors_te) {
        let (heat, dets) = detect_sh(&p.detector.net, &c.x, a, &cat, &pspec).unwrap();
        let plain = plain_detections(&det_plain, c, &cat, &pspec);
        for ((d, q), t) in dets.iter().zip(&plain).zip(truth_centers(c)) {
            with_mm.push(detection_distance(d.center, t, c.x.spacing));
            without_mm.push(detection_distance(*q, t, c.x.spacing));
        }
        detections.push((heat, dets));
    }

    // small organs: crops around detections vs the whole volume from CT alone. The
    // crop network is trained on the detector's own heat maps, as at inference.
    let heat_tr: Vec<HeatMapSet> = tr
        .iter()
        .zip(&anchors_tr)
        .map(|(c, a)| detect_sh(&p.detector.net, &c.x, a, &cat, &pspec).unwrap().0)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(train_seed + 3);
    let lr = plan.lr_sh;
    let sh_spec = p.sh.net.spec().clone();
    train(
        &mut p.sh.net,
        |_| {
            tr.iter()
                .zip(&heat_tr)
                .flat_map(|(c, h)| sh_training_crops(&cat, &sh_spec, pspec.crop_factor, c, h, 2, &mut rng))
                .collect()
        },
        cfg.crop_epochs,
        lr,
        LossKind::Dice,
        bs,
        train_seed + 4,
    );
    train(
        &mut sh_whole,
        |e| {
            let mut out = Vec::new();
            for (i, c) in tr.iter().enumerate() {
                for v in vois(&cat, c, Stratum::Sh, size, 1, epoch_seed(2, e, i)) {
                    let input = c.x.crop(&v).unwrap().to_tensor();
                    out.push(Batch::new(input, target(&cat, &c.labels.crop(&v).unwrap(), Stratum::Sh)).unwrap());
                }
            }
            out
        },
        cfg.epochs,
        lr,
        LossKind::Dice,
        bs,
        train_seed + 4,
    );

    let mut crop_dsc = Vec::new();
    let mut whole_dsc = Vec::new();
    for (c, (heat, dets)) in te.iter().zip(&detections) {
        let per_voi: Vec<_> = dets
            .iter()
            .map(|d| {
                let voi = p.sh_crop(d).unwrap();
                (
                    voi,
                    forward_sh(&p.sh.net, &c.x.crop(&voi).unwrap(), &heat.crop(&voi).unwrap()).unwrap(),
                )
            })
            .collect();
        let stitched = stitch_sh(&cat, &c.x, &per_voi);
        crop_dsc.push(stratum_dsc(&cat, &stitched, &c.labels, Stratum::Sh));
        let whole = forward_anchor(&sh_whole, &c.x, &pspec.sliding).unwrap();
        whole_dsc.push(stratum_dsc(
            &cat,
            &to_catalog_ids(&cat, &whole, Stratum::Sh),
            &c.labels,
            Stratum::Sh,
        ));
    }

    SeedOutcome {
        seed,
        anchor_dsc,
        mid_true_anchor,
        mid_uniform_anchor,
        sh_crop: mean(&crop_dsc),
        sh_whole: mean(&whole_dsc),
        detect_with_anchor_mm: mean(&with_mm),
        detect_without_anchor_mm: mean(&without_mm),
        seconds: started.elapsed().as_secs_f64(),
    }
}

/// Peak voxel of each heat channel of the CT-only detector.
fn plain_detections(net: &Backbone<f32>, c: &Case, cat: &OarCatalog, spec: &PipelineSpec) -> Vec<[usize; 3]> {
    let raw = |w: &Tensor<f32>| Ok(net.infer(w)?.final_logits().clone());
    let out = stratoseg::sliding::sliding_mean(&raw, &c.x.to_tensor(), &spec.sliding, false).unwrap();
    let s = c.x.shape();
    let heat = HeatMapSet {
        data: Array4::from_shape_vec((out.probs.channels(), s[0], s[1], s[2]), out.probs.into_vec()).unwrap(),
        sigma_mm: spec.heat_sigma_mm,
        spacing: c.x.spacing,
        origin: c.x.origin,
    };
    stratoseg::pipeline::detections_from_heat(&heat, cat, spec.crop_factor)
        .unwrap()
        .into_iter()
        .map(|d| d.center)
        .collect()
}
