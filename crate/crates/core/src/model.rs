//! Domain types: volumes, label maps, probability maps, heat maps, the organ
//! catalog and crop geometry.
//!
//! All grids are indexed `(x, y, z)` with z the slice axis; 4-D grids carry the
//! channel axis first. Spacing and origin are in millimetres.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Real, Tensor};

/// Scalar image on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

/// Integer class per voxel; 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub data: Array3<u16>,
    pub class_count: u16,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

/// Per-class probabilities, channel 0 = background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMaps {
    pub data: Array4<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

/// One Gaussian center map per small-organ channel.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMapSet {
    pub data: Array4<f32>,
    pub sigma_mm: f64,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|&s| s.is_finite() && s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!(
            "spacing must be positive, got {spacing:?}"
        )))
    }
}

fn dims3<A>(a: &Array3<A>) -> [usize; 3] {
    let d = a.dim();
    [d.0, d.1, d.2]
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Self { data, spacing, origin })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(&self.data)
    }

    /// `[1, 1, x, y, z]` network input.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let s = self.shape();
        let data = self.data.iter().map(|&v| T::of(v as f64)).collect();
        Tensor::from_vec([1, 1, s[0], s[1], s[2]], data).expect("shape matches")
    }
}

impl LabelMap {
    pub fn new(data: Array3<u16>, class_count: u16, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        if let Some(&bad) = data.iter().find(|&&v| v > class_count) {
            return Err(Error::InvalidValue(format!(
                "label {bad} exceeds class count {class_count}"
            )));
        }
        Ok(Self {
            data,
            class_count,
            spacing,
            origin,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(&self.data)
    }

    pub fn count(&self, class: u16) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }

    pub fn mask(&self, class: u16) -> Array3<bool> {
        self.data.mapv(|v| v == class)
    }

    /// Center of mass of a class, rounded to the nearest voxel.
    pub fn center_of_mass(&self, class: u16) -> Option<[usize; 3]> {
        center_of_mass(self.data.view(), |&v| v == class)
    }

    /// Relabel through `map` (unlisted classes become background).
    pub fn remap(&self, map: &BTreeMap<u16, u16>, class_count: u16) -> Self {
        Self {
            data: self.data.mapv(|v| map.get(&v).copied().unwrap_or(0)),
            class_count,
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

pub(crate) fn center_of_mass<A>(grid: ArrayView3<A>, pred: impl Fn(&A) -> bool) -> Option<[usize; 3]> {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for ((x, y, z), v) in grid.indexed_iter() {
        if pred(v) {
            sum[0] += x as f64;
            sum[1] += y as f64;
            sum[2] += z as f64;
            n += 1;
        }
    }
    (n > 0).then(|| sum.map(|s| (s / n as f64).round() as usize))
}

impl ProbMaps {
    pub fn new(data: Array4<f32>, spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        check_spacing(spacing)?;
        Ok(Self { data, spacing, origin })
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.1, d.2, d.3]
    }

    /// Uninformative maps: every class equally likely.
    pub fn uniform(channels: usize, shape: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        Self {
            data: Array4::from_elem((channels, shape[0], shape[1], shape[2]), 1.0 / channels as f32),
            spacing,
            origin,
        }
    }

    /// Build from item `n` of a `[batch, channel, x, y, z]` tensor.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize, spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let [_, c, x, y, z] = t.shape();
        let data: Vec<f32> = t.item(n).iter().map(|v| v.f64() as f32).collect();
        Self {
            data: Array4::from_shape_vec((c, x, y, z), data).expect("shape matches"),
            spacing,
            origin,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let (c, x, y, z) = self.data.dim();
        Tensor::from_vec([1, c, x, y, z], self.data.iter().map(|&v| T::of(v as f64)).collect()).expect("shape matches")
    }

    /// Per-voxel argmax, ties to the lowest channel.
    pub fn argmax(&self) -> LabelMap {
        let s = self.shape();
        let mut out = Array3::<u16>::zeros((s[0], s[1], s[2]));
        for c in 1..self.channels() {
            let ch = self.data.index_axis(Axis(0), c);
            ndarray::Zip::indexed(&mut out).and(&ch).for_each(|(x, y, z), o, &p| {
                if p > self.data[[*o as usize, x, y, z]] {
                    *o = c as u16;
                }
            });
        }
        LabelMap {
            data: out,
            class_count: (self.channels() - 1) as u16,
            spacing: self.spacing,
            origin: self.origin,
        }
    }
}

impl HeatMapSet {
    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.1, d.2, d.3]
    }

    /// Location of the maximum of each channel; ties go to the first voxel in
    /// row-major order.
    pub fn peaks(&self) -> Vec<([usize; 3], f32)> {
        (0..self.channels())
            .map(|c| {
                let ch = self.data.index_axis(Axis(0), c);
                let mut best = ([0, 0, 0], f32::NEG_INFINITY);
                for ((x, y, z), &v) in ch.indexed_iter() {
                    if v > best.1 {
                        best = ([x, y, z], v);
                    }
                }
                best
            })
            .collect()
    }
}

/// One-hot encoding with `class_count + 1` channels.
pub fn one_hot(labels: &LabelMap) -> ProbMaps {
    let s = labels.shape();
    let c = labels.class_count as usize + 1;
    let mut data = Array4::<f32>::zeros((c, s[0], s[1], s[2]));
    for ((x, y, z), &v) in labels.data.indexed_iter() {
        data[[v as usize, x, y, z]] = 1.0;
    }
    ProbMaps {
        data,
        spacing: labels.spacing,
        origin: labels.origin,
    }
}

/// Axis-aligned sub-region of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Voi {
    pub start: [usize; 3],
    pub size: [usize; 3],
    pub source_shape: [usize; 3],
}

impl Voi {
    pub fn new(start: [usize; 3], size: [usize; 3], source_shape: [usize; 3]) -> Result<Self> {
        let v = Self {
            start,
            size,
            source_shape,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn whole(shape: [usize; 3]) -> Self {
        Self {
            start: [0; 3],
            size: shape,
            source_shape: shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (0..3).any(|a| self.size[a] == 0 || self.start[a] + self.size[a] > self.source_shape[a]) {
            return Err(Error::Bounds {
                start: self.start,
                size: self.size,
                shape: self.source_shape,
            });
        }
        Ok(())
    }

    pub fn end(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.start[a] + self.size[a])
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.start[a] && p[a] < self.start[a] + self.size[a])
    }

    /// `inner`, given relative to this VOI's crop, expressed in source coordinates.
    pub fn compose(&self, inner: &Voi) -> Result<Voi> {
        if inner.source_shape != self.size {
            return shape_err(format!(
                "inner VOI is relative to {:?}, outer crop has size {:?}",
                inner.source_shape, self.size
            ));
        }
        inner.validate()?;
        Voi::new(
            [0, 1, 2].map(|a| self.start[a] + inner.start[a]),
            inner.size,
            self.source_shape,
        )
    }

    /// Same center, size grown to the next multiple of `multiple` per axis (or
    /// shrunk to the largest multiple that fits), translated back in bounds.
    pub fn snapped(&self, multiple: [usize; 3]) -> Result<Voi> {
        let mut start = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            let m = multiple[a].max(1);
            let fit = self.source_shape[a] / m * m;
            if fit == 0 {
                return shape_err(format!(
                    "axis {a} of length {} is shorter than the required multiple {m}",
                    self.source_shape[a]
                ));
            }
            size[a] = (self.size[a].div_ceil(m) * m).min(fit);
            let center = self.start[a] as i64 + self.size[a] as i64 / 2;
            start[a] = place(center, size[a], self.source_shape[a]);
        }
        Voi::new(start, size, self.source_shape)
    }
}

/// Start index placing a window of `size` centred on `center`, translated to fit.
fn place(center: i64, size: usize, len: usize) -> usize {
    let start = center - size as i64 / 2;
    start.clamp(0, (len - size) as i64) as usize
}

/// VOI of `factor` times the organ extent centred on a voxel, translated (never
/// shrunk) to fit, and clamped to the volume where it is larger than it.
pub fn voi_around_point(
    center: [usize; 3],
    extent_mm: [f64; 3],
    spacing: [f64; 3],
    factor: f64,
    source_shape: [usize; 3],
) -> Voi {
    let mut start = [0; 3];
    let mut size = [0; 3];
    for a in 0..3 {
        let want = (factor * extent_mm[a] / spacing[a] + 0.5).floor();
        size[a] = (want.max(1.0) as usize).min(source_shape[a]);
        start[a] = place(center[a] as i64, size[a], source_shape[a]);
    }
    Voi {
        start,
        size,
        source_shape,
    }
}

/// Grids that can be cut to a VOI.
pub trait Crop: Sized {
    fn grid_shape(&self) -> [usize; 3];
    fn crop(&self, voi: &Voi) -> Result<Self>;
}

fn check_voi(voi: &Voi, shape: [usize; 3]) -> Result<()> {
    voi.validate()?;
    if voi.source_shape != shape {
        return shape_err(format!(
            "VOI is defined on {:?} but the grid is {:?}",
            voi.source_shape, shape
        ));
    }
    Ok(())
}

fn shifted(origin: [f64; 3], spacing: [f64; 3], start: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| origin[a] + start[a] as f64 * spacing[a])
}

fn crop3<A: Clone>(a: &Array3<A>, voi: &Voi) -> Array3<A> {
    let [x0, y0, z0] = voi.start;
    let [x1, y1, z1] = voi.end();
    a.slice(s![x0..x1, y0..y1, z0..z1]).to_owned()
}

fn crop4<A: Clone>(a: &Array4<A>, voi: &Voi) -> Array4<A> {
    let [x0, y0, z0] = voi.start;
    let [x1, y1, z1] = voi.end();
    a.slice(s![.., x0..x1, y0..y1, z0..z1]).to_owned()
}

impl Crop for Volume {
    fn grid_shape(&self) -> [usize; 3] {
        self.shape()
    }

    fn crop(&self, voi: &Voi) -> Result<Self> {
        check_voi(voi, self.shape())?;
        Ok(Self {
            data: crop3(&self.data, voi),
            spacing: self.spacing,
            origin: shifted(self.origin, self.spacing, voi.start),
        })
    }
}

impl Crop for LabelMap {
    fn grid_shape(&self) -> [usize; 3] {
        self.shape()
    }

    fn crop(&self, voi: &Voi) -> Result<Self> {
        check_voi(voi, self.shape())?;
        Ok(Self {
            data: crop3(&self.data, voi),
            class_count: self.class_count,
            spacing: self.spacing,
            origin: shifted(self.origin, self.spacing, voi.start),
        })
    }
}

impl Crop for ProbMaps {
    fn grid_shape(&self) -> [usize; 3] {
        self.shape()
    }

    fn crop(&self, voi: &Voi) -> Result<Self> {
        check_voi(voi, self.shape())?;
        Ok(Self {
            data: crop4(&self.data, voi),
            spacing: self.spacing,
            origin: shifted(self.origin, self.spacing, voi.start),
        })
    }
}

impl Crop for HeatMapSet {
    fn grid_shape(&self) -> [usize; 3] {
        self.shape()
    }

    fn crop(&self, voi: &Voi) -> Result<Self> {
        check_voi(voi, self.shape())?;
        Ok(Self {
            data: crop4(&self.data, voi),
            sigma_mm: self.sigma_mm,
            spacing: self.spacing,
            origin: shifted(self.origin, self.spacing, voi.start),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stratum {
    Anchor,
    Mid,
    Sh,
}

impl Stratum {
    pub const ALL: [Stratum; 3] = [Stratum::Anchor, Stratum::Mid, Stratum::Sh];

    pub fn name(self) -> &'static str {
        match self {
            Stratum::Anchor => "ANCHOR",
            Stratum::Mid => "MID",
            Stratum::Sh => "SH",
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganEntry {
    pub organ_id: u16,
    pub name: String,
    pub stratum: Stratum,
    pub max_extent_mm: [f64; 3],
    /// Small organs sharing a group are detected through a single heat map.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge_group: Option<String>,
}

/// A heat-map channel and the organs it locates.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatChannel {
    pub name: String,
    pub organs: Vec<u16>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OarCatalog {
    pub entries: Vec<OrganEntry>,
}

impl OarCatalog {
    pub fn new(entries: Vec<OrganEntry>) -> Result<Self> {
        let c = Self { entries };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Catalog("catalog is empty".into()));
        }
        let mut ids: Vec<u16> = self.entries.iter().map(|e| e.organ_id).collect();
        ids.sort_unstable();
        for (i, &id) in ids.iter().enumerate() {
            if id as usize != i + 1 {
                return Err(Error::Catalog(format!(
                    "organ ids must be unique and contiguous from 1, got {ids:?}"
                )));
            }
        }
        for e in &self.entries {
            if e.stratum == Stratum::Sh && !e.max_extent_mm.iter().all(|&v| v > 0.0) {
                return Err(Error::Catalog(format!(
                    "small organ {} needs a positive extent, got {:?}",
                    e.name, e.max_extent_mm
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, organ_id: u16) -> Option<&OrganEntry> {
        self.entries.iter().find(|e| e.organ_id == organ_id)
    }

    /// Organs of a stratum, ordered by id. Their position in this list plus one is
    /// their class index within that stratum's branch.
    pub fn stratum(&self, s: Stratum) -> Vec<&OrganEntry> {
        let mut v: Vec<_> = self.entries.iter().filter(|e| e.stratum == s).collect();
        v.sort_by_key(|e| e.organ_id);
        v
    }

    pub fn stratum_ids(&self, s: Stratum) -> Vec<u16> {
        self.stratum(s).iter().map(|e| e.organ_id).collect()
    }

    /// Heat-map channels: one per small organ, except that organs sharing a merge
    /// group share a channel. Ordered by lowest member id.
    pub fn heat_channels(&self) -> Vec<HeatChannel> {
        let mut out: Vec<HeatChannel> = Vec::new();
        for e in self.stratum(Stratum::Sh) {
            match &e.merge_group {
                Some(g) => match out.iter_mut().find(|c| &c.name == g) {
                    Some(c) => c.organs.push(e.organ_id),
                    None => out.push(HeatChannel {
                        name: g.clone(),
                        organs: vec![e.organ_id],
                    }),
                },
                None => out.push(HeatChannel {
                    name: e.name.clone(),
                    organs: vec![e.organ_id],
                }),
            }
        }
        out
    }

    /// Full label map restricted to one stratum, relabelled to `1..=n`.
    pub fn stratum_labels(&self, labels: &LabelMap, s: Stratum) -> LabelMap {
        let ids = self.stratum_ids(s);
        let map = ids.iter().enumerate().map(|(i, &id)| (id, i as u16 + 1)).collect();
        labels.remap(&map, ids.len() as u16)
    }

    /// Reject label ids that the catalog does not list.
    pub fn check_labels(&self, labels: &LabelMap) -> Result<()> {
        let n = self.len() as u16;
        if let Some(&bad) = labels.data.iter().find(|&&v| v > n) {
            return Err(Error::Catalog(format!(
                "label id {bad} is not in the catalog (1..={n})"
            )));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// The 42-organ head-and-neck stratification. Extents are typical adult sizes,
    /// approximate.
    pub fn reference() -> Self {
        Self::from_json(include_str!("../assets/reference_catalog.json")).expect("bundled catalog is valid")
    }
}
