//! Seeded synthetic head-and-neck stand-in.
//!
//! Anchors are large bright spheres with distinct intensities. Mid-level organs are
//! faint blobs touching a particular anchor, and small organs are tiny faint blobs
//! at a fixed offset from one. Bright plates act as decoy anchors: each carries
//! unlabelled look-alikes of the faint organs, so intensity alone cannot tell a
//! real organ from a distractor; its neighbour has to.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::{LabelMap, OarCatalog, OrganEntry, Stratum, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    /// Sphere stretched per axis.
    Ellipsoid {
        axis_scale: [f64; 3],
    },
}

impl Primitive {
    fn scale(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere => [1.0; 3],
            Primitive::Ellipsoid { axis_scale } => *axis_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomOrgan {
    pub name: String,
    pub stratum: Stratum,
    pub primitive: Primitive,
    /// Intensity above the surrounding tissue, in multiples of the noise sigma.
    pub contrast: f64,
    /// Radius range in voxels.
    pub radius: [f64; 2],
    /// Index (into `organs`) of the anchor this organ sits against. Required for
    /// mid-level and small organs, ignored for anchors.
    #[serde(default)]
    pub attached_to: Option<usize>,
    /// Fixed direction from the anchor center for small organs; mid-level organs
    /// use a random direction when absent.
    #[serde(default)]
    pub direction: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub volume_shape: [usize; 3],
    pub spacing: [f64; 3],
    pub tissue_hu: f64,
    pub noise_sigma: f64,
    pub organs: Vec<PhantomOrgan>,
    /// Bright plates with anchor-like intensity.
    pub decoys: usize,
    /// Empty voxels kept between objects.
    pub gap: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let organ = |name: &str, stratum, contrast, radius, attached_to, direction| PhantomOrgan {
            name: name.into(),
            stratum,
            primitive: Primitive::Sphere,
            contrast,
            radius,
            attached_to,
            direction,
        };
        Self {
            volume_shape: [64, 64, 64],
            spacing: [2.0, 2.0, 2.0],
            tissue_hu: 40.0,
            noise_sigma: 20.0,
            organs: vec![
                organ("anchor_a", Stratum::Anchor, 12.0, [7.0, 9.0], None, None),
                organ("anchor_b", Stratum::Anchor, 24.0, [6.0, 8.0], None, None),
                organ("mid_a", Stratum::Mid, 2.5, [4.5, 6.0], Some(0), None),
                organ("mid_b", Stratum::Mid, 2.5, [4.5, 6.0], Some(1), None),
                organ("small_a", Stratum::Sh, 1.0, [2.0, 3.0], Some(0), Some([0.0, 0.0, 1.0])),
                organ("small_b", Stratum::Sh, 1.0, [2.0, 3.0], Some(1), Some([0.0, 0.0, -1.0])),
            ],
            decoys: 2,
            gap: 1.0,
        }
    }
}

impl PhantomSpec {
    /// A 32³ version of the default layout with one decoy, for quick runs.
    pub fn miniature() -> Self {
        let mut s = Self {
            volume_shape: [32, 32, 32],
            decoys: 1,
            ..Self::default()
        };
        let radii = [[4.0, 5.0], [3.5, 4.5], [2.5, 3.0], [2.5, 3.0], [1.5, 2.0], [1.5, 2.0]];
        for (o, r) in s.organs.iter_mut().zip(radii) {
            o.radius = r;
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.volume_shape.contains(&0) || !self.spacing.iter().all(|&s| s > 0.0) {
            return config_err("phantom shape and spacing must be positive");
        }
        if !(self.noise_sigma > 0.0) {
            return config_err("noise sigma must be positive");
        }
        if self.organs.is_empty() {
            return config_err("phantom needs at least one organ");
        }
        for o in &self.organs {
            let [lo, hi] = o.radius;
            if !(lo > 0.0 && hi >= lo) {
                return config_err(format!("{}: bad radius range {:?}", o.name, o.radius));
            }
            let diameter = 2.0 * hi * o.primitive.scale().iter().copied().fold(0.0, f64::max);
            match o.stratum {
                Stratum::Anchor if o.contrast < 3.0 => {
                    return config_err(format!("anchor {} needs contrast >= 3 sigma", o.name));
                }
                Stratum::Sh if o.contrast > 1.0 => {
                    return config_err(format!("small organ {} must have contrast <= 1 sigma", o.name));
                }
                Stratum::Sh if diameter > 8.0 => {
                    return config_err(format!("small organ {} is wider than 8 voxels", o.name));
                }
                _ => {}
            }
            if o.stratum != Stratum::Anchor {
                match o.attached_to {
                    Some(i) if self.organs.get(i).is_some_and(|a| a.stratum == Stratum::Anchor) => {}
                    _ => return config_err(format!("{} must be attached to an anchor", o.name)),
                }
            }
        }
        Ok(())
    }

    /// Catalog in organ order. Extents are the largest possible physical size.
    pub fn catalog(&self) -> OarCatalog {
        let mut order: Vec<usize> = (0..self.organs.len()).collect();
        order.sort_by_key(|&i| self.organs[i].stratum);
        OarCatalog {
            entries: order
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let o = &self.organs[i];
                    let sc = o.primitive.scale();
                    OrganEntry {
                        organ_id: k as u16 + 1,
                        name: o.name.clone(),
                        stratum: o.stratum,
                        max_extent_mm: [0, 1, 2].map(|a| 2.0 * o.radius[1] * sc[a] * self.spacing[a]),
                        merge_group: None,
                    }
                })
                .collect(),
        }
    }

    /// Catalog id of each organ in `organs`.
    fn organ_ids(&self) -> Vec<u16> {
        let mut order: Vec<usize> = (0..self.organs.len()).collect();
        order.sort_by_key(|&i| self.organs[i].stratum);
        let mut ids = vec![0u16; self.organs.len()];
        for (k, &i) in order.iter().enumerate() {
            ids[i] = k as u16 + 1;
        }
        ids
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Raw HU.
    pub volume: Volume,
    pub labels: LabelMap,
    pub catalog: OarCatalog,
    /// Exact (unrounded) organ centers in voxels, by catalog id - 1.
    pub centers: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipsoid { c: [f64; 3], r: [f64; 3] },
    Slab { c: [f64; 3], half: [f64; 3] },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match *self {
            Shape::Ellipsoid { c, r } => (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0,
            Shape::Slab { c, half } => (0..3).all(|a| (p[a] - c[a]).abs() <= half[a]),
        }
    }

    fn center(&self) -> [f64; 3] {
        match *self {
            Shape::Ellipsoid { c, .. } | Shape::Slab { c, .. } => c,
        }
    }

    /// Per-axis half extent of the bounding box.
    fn half(&self) -> [f64; 3] {
        match *self {
            Shape::Ellipsoid { r, .. } => r,
            Shape::Slab { half, .. } => half,
        }
    }

    /// Largest distance from the center along any axis.
    fn reach(&self) -> f64 {
        self.half().iter().copied().fold(0.0, f64::max)
    }

    fn grown(&self, by: f64) -> Shape {
        match *self {
            Shape::Ellipsoid { c, r } => Shape::Ellipsoid {
                c,
                r: r.map(|v| v + by),
            },
            Shape::Slab { c, half } => Shape::Slab {
                c,
                half: half.map(|v| v + by),
            },
        }
    }

    /// Voxel bounding box, clipped to the grid.
    fn voxel_box(&self, shape: [usize; 3]) -> ([usize; 3], [usize; 3]) {
        let c = self.center();
        let h = self.half();
        let lo = [0, 1, 2].map(|a| (c[a] - h[a]).floor().max(0.0) as usize);
        let hi = [0, 1, 2].map(|a| ((c[a] + h[a]).ceil().max(0.0) as usize).min(shape[a] - 1));
        (lo, hi)
    }

    fn for_each_voxel(&self, shape: [usize; 3], mut f: impl FnMut([usize; 3])) {
        let (lo, hi) = self.voxel_box(shape);
        for x in lo[0]..=hi[0] {
            for y in lo[1]..=hi[1] {
                for z in lo[2]..=hi[2] {
                    if self.contains([x as f64, y as f64, z as f64]) {
                        f([x, y, z]);
                    }
                }
            }
        }
    }
}

struct Placed {
    shape: Shape,
    label: u16,
    contrast: f64,
}

struct Layout<'a> {
    spec: &'a PhantomSpec,
    placed: Vec<Placed>,
    occupied: Array3<bool>,
}

impl Layout<'_> {
    /// Inside the grid with a one-voxel margin and at least `gap` voxels from
    /// everything placed so far.
    fn fits(&self, s: &Shape) -> bool {
        let c = s.center();
        let h = s.half();
        let n = self.spec.volume_shape;
        if !(0..3).all(|a| c[a] - h[a] >= 1.0 && c[a] + h[a] <= n[a] as f64 - 2.0) {
            return false;
        }
        let mut clear = true;
        s.grown(self.spec.gap)
            .for_each_voxel(n, |[x, y, z]| clear &= !self.occupied[[x, y, z]]);
        clear
    }

    fn push(&mut self, shape: Shape, label: u16, contrast: f64) {
        let occ = &mut self.occupied;
        shape.for_each_voxel(self.spec.volume_shape, |[x, y, z]| occ[[x, y, z]] = true);
        self.placed.push(Placed { shape, label, contrast });
    }
}

fn ellipsoid(c: [f64; 3], radius: f64, prim: &Primitive) -> Shape {
    let s = prim.scale();
    Shape::Ellipsoid {
        c,
        r: [radius * s[0], radius * s[1], radius * s[2]],
    }
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn offset(c: [f64; 3], dir: [f64; 3], dist: f64) -> [f64; 3] {
    [0, 1, 2].map(|a| c[a] + dir[a] * dist)
}

const ATTEMPTS: usize = 200;

/// Render a phantom. The same `(spec, seed)` always gives bit-identical output.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..ATTEMPTS {
        if let Some(layout) = try_layout(spec, &mut rng) {
            return Ok(render(spec, layout, &mut rng));
        }
    }
    Err(Error::Config(format!(
        "could not fit the phantom organs into {:?} after {ATTEMPTS} attempts",
        spec.volume_shape
    )))
}

fn try_layout<'a>(spec: &'a PhantomSpec, rng: &mut ChaCha8Rng) -> Option<Layout<'a>> {
    let ids = spec.organ_ids();
    let [nx, ny, nz] = spec.volume_shape;
    let mut layout = Layout {
        spec,
        placed: Vec::new(),
        occupied: Array3::from_elem((nx, ny, nz), false),
    };
    let mut anchor_shape: Vec<Option<Shape>> = vec![None; spec.organs.len()];
    let n = spec.volume_shape.map(|v| v as f64);
    let sample_radius = |rng: &mut ChaCha8Rng, r: [f64; 2]| {
        if r[1] > r[0] {
            rng.gen_range(r[0]..=r[1])
        } else {
            r[0]
        }
    };

    // anchors first, then organs with a fixed offset, then the rest
    let mut order: Vec<usize> = (0..spec.organs.len()).collect();
    order.sort_by_key(|&i| {
        let o = &spec.organs[i];
        match (o.stratum, o.direction) {
            (Stratum::Anchor, _) => 0,
            (_, Some(_)) => 1,
            _ => 2,
        }
    });
    for &i in &order {
        let o = &spec.organs[i];
        let r = sample_radius(rng, o.radius);
        let mut ok = false;
        for _ in 0..ATTEMPTS {
            let shape = match o.attached_to.filter(|_| o.stratum != Stratum::Anchor) {
                None => {
                    let c = [0, 1, 2].map(|a| rng.gen_range(0.0..n[a]));
                    ellipsoid(c, r, &o.primitive)
                }
                Some(a) => {
                    let host = anchor_shape[a]?;
                    let dir = match o.direction {
                        Some(d) => {
                            let j: [f64; 3] = UnitSphere.sample(rng);
                            unit([0, 1, 2].map(|k| d[k] + 0.15 * j[k]))
                        }
                        None => UnitSphere.sample(rng),
                    };
                    let probe = ellipsoid([0.0; 3], r, &o.primitive);
                    let dist = host.reach() + probe.reach() + spec.gap + 0.75;
                    ellipsoid(offset(host.center(), dir, dist), r, &o.primitive)
                }
            };
            if layout.fits(&shape) {
                if o.stratum == Stratum::Anchor {
                    anchor_shape[i] = Some(shape);
                }
                layout.push(shape, ids[i], o.contrast);
                ok = true;
                break;
            }
        }
        if !ok {
            return None;
        }
    }

    let anchors: Vec<&PhantomOrgan> = spec.organs.iter().filter(|o| o.stratum == Stratum::Anchor).collect();
    let faint: Vec<&PhantomOrgan> = spec.organs.iter().filter(|o| o.stratum != Stratum::Anchor).collect();
    for _ in 0..spec.decoys {
        // a bright plate, thin along one random axis
        let thin = rng.gen_range(0..3);
        let like = anchors[rng.gen_range(0..anchors.len())];
        let extent = rng.gen_range(like.radius[0]..=like.radius[1].max(like.radius[0]));
        let half = [0, 1, 2].map(|a| if a == thin { 1.0 } else { extent });
        let mut plate = None;
        for _ in 0..ATTEMPTS {
            let c = [0, 1, 2].map(|a| rng.gen_range(0.0..n[a]));
            let s = Shape::Slab { c, half };
            if layout.fits(&s) {
                plate = Some(s);
                break;
            }
        }
        let plate = plate?;
        layout.push(plate, 0, like.contrast);
        // unlabelled copies of the faint organs lying on either face of the plate
        let Shape::Slab { c: pc, half: ph } = plate else {
            unreachable!()
        };
        for o in &faint {
            let r = sample_radius(rng, o.radius);
            let mut placed = false;
            for _ in 0..ATTEMPTS {
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let probe = ellipsoid([0.0; 3], r, &o.primitive);
                let c = [0, 1, 2].map(|a| {
                    if a == thin {
                        pc[a] + side * (ph[a] + probe.half()[a] + spec.gap + 0.75)
                    } else {
                        pc[a] + rng.gen_range(-0.6..=0.6) * ph[a]
                    }
                });
                let s = ellipsoid(c, r, &o.primitive);
                if layout.fits(&s) {
                    layout.push(s, 0, o.contrast);
                    placed = true;
                    break;
                }
            }
            if !placed {
                return None;
            }
        }
    }
    Some(layout)
}

fn render(spec: &PhantomSpec, layout: Layout<'_>, rng: &mut ChaCha8Rng) -> Phantom {
    let [nx, ny, nz] = spec.volume_shape;
    let mut labels = Array3::<u16>::zeros((nx, ny, nz));
    let mut hu = Array3::<f32>::from_elem((nx, ny, nz), spec.tissue_hu as f32);
    for p in &layout.placed {
        let value = (spec.tissue_hu + p.contrast * spec.noise_sigma) as f32;
        p.shape.for_each_voxel(spec.volume_shape, |[x, y, z]| {
            hu[[x, y, z]] = value;
            labels[[x, y, z]] = p.label;
        });
    }
    let noise = Normal::new(0.0, spec.noise_sigma).expect("positive sigma");
    hu.mapv_inplace(|v| v + noise.sample(rng) as f32);
    let catalog = spec.catalog();
    let mut centers = vec![[0.0; 3]; catalog.len()];
    for p in layout.placed.iter().filter(|p| p.label > 0) {
        centers[p.label as usize - 1] = p.shape.center();
    }
    let half_extent = [0, 1, 2].map(|a| (spec.volume_shape[a] as f64 - 1.0) * spec.spacing[a] / 2.0);
    let origin = half_extent.map(|h| -h);
    Phantom {
        volume: Volume {
            data: hu,
            spacing: spec.spacing,
            origin,
        },
        labels: LabelMap {
            data: labels,
            class_count: catalog.len() as u16,
            spacing: spec.spacing,
            origin,
        },
        catalog,
        centers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miniature_generates() {
        for seed in 0..4 {
            let p = generate_phantom(&PhantomSpec::miniature(), seed).unwrap();
            for id in 1..=6 {
                assert!(p.labels.count(id) > 0, "seed {seed} organ {id}");
            }
        }
    }

    #[test]
    fn same_seed_same_phantom() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 3).unwrap();
        let b = generate_phantom(&spec, 3).unwrap();
        assert_eq!(a.volume, b.volume);
        assert_eq!(a.labels, b.labels);
        let c = generate_phantom(&spec, 4).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn every_organ_is_rendered_and_catalogued() {
        let spec = PhantomSpec::default();
        let p = generate_phantom(&spec, 9).unwrap();
        p.catalog.validate().unwrap();
        assert_eq!(p.catalog.stratum(Stratum::Anchor).len(), 2);
        for id in 1..=p.catalog.len() as u16 {
            assert!(p.labels.count(id) > 0, "organ {id} missing");
        }
        assert!(p
            .catalog
            .stratum(Stratum::Sh)
            .iter()
            .all(|e| e.max_extent_mm[0] <= 8.0 * spec.spacing[0]));
    }

    #[test]
    fn labelled_voxels_carry_the_organ_intensity() {
        let spec = PhantomSpec::default();
        let p = generate_phantom(&spec, 1).unwrap();
        for e in &p.catalog.entries {
            let o = spec.organs.iter().find(|o| o.name == e.name).unwrap();
            let vals: Vec<f64> = p
                .labels
                .data
                .iter()
                .zip(p.volume.data.iter())
                .filter(|(&l, _)| l == e.organ_id)
                .map(|(_, &v)| v as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let want = spec.tissue_hu + o.contrast * spec.noise_sigma;
            let tol = 5.0 * spec.noise_sigma / (vals.len() as f64).sqrt();
            assert!((mean - want).abs() < tol, "{}: {mean} vs {want}", e.name);
        }
    }

    #[test]
    fn sphere_voxel_count() {
        let mut spec = PhantomSpec::default();
        spec.organs.truncate(1);
        spec.organs[0].radius = [10.0, 10.0];
        spec.decoys = 0;
        let p = generate_phantom(&spec, 2).unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 1000.0;
        let n = p.labels.count(1) as f64;
        assert!((n / expected - 1.0).abs() < 0.05, "{n} vs {expected}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = PhantomSpec::default();
        spec.organs[4].radius = [3.0, 5.0];
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.organs[0].contrast = 2.0;
        assert!(spec.validate().is_err());
        let mut spec = PhantomSpec::default();
        spec.volume_shape = [12, 12, 12];
        assert!(generate_phantom(&spec, 0).is_err());
    }
}
