//! Overlap and surface-distance metrics, and per-organ reports.
//!
//! Surfaces are the foreground voxels with at least one 6-connected background
//! neighbour, where anything outside the grid counts as background. Distances are
//! in mm.

use std::io::Write;

use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::{LabelMap, OarCatalog, Stratum};

fn same_shape(a: &Array3<bool>, b: &Array3<bool>) -> Result<()> {
    if a.dim() != b.dim() {
        return shape_err(format!("mask shapes {:?} and {:?} differ", a.dim(), b.dim()));
    }
    Ok(())
}

/// Dice overlap. Two empty masks agree perfectly; one empty mask scores 0.
pub fn dsc(a: &Array3<bool>, b: &Array3<bool>) -> Result<f64> {
    same_shape(a, b)?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    Zip::from(a).and(b).for_each(|&x, &y| {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    });
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    })
}

/// Surface voxels of a mask.
pub fn boundary(mask: &Array3<bool>) -> Array3<bool> {
    let (nx, ny, nz) = mask.dim();
    Array3::from_shape_fn((nx, ny, nz), |(x, y, z)| {
        if !mask[[x, y, z]] {
            return false;
        }
        let bg = |dx: isize, dy: isize, dz: isize| {
            let (i, j, k) = (x as isize + dx, y as isize + dy, z as isize + dz);
            if i < 0 || j < 0 || k < 0 || i >= nx as isize || j >= ny as isize || k >= nz as isize {
                return true;
            }
            !mask[[i as usize, j as usize, k as usize]]
        };
        bg(-1, 0, 0) || bg(1, 0, 0) || bg(0, -1, 0) || bg(0, 1, 0) || bg(0, 0, -1) || bg(0, 0, 1)
    })
}

/// Squared distance transform along one line: `out[p] = min_q w(p-q)^2 + f[q]`.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let rf = r as f64;
                    let s = ((f[q] + w * qf * qf) - (f[r] + w * rf * rf)) / (2.0 * w * (qf - rf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < v.len() && z[k + 1] < pf {
            k += 1;
        }
        let d = pf - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Squared mm distance from every voxel to the nearest `true` voxel of `features`.
pub fn squared_distance_map(features: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let mut v = Vec::new();
    let mut z = Vec::new();
    for axis in (0..3).rev() {
        let w = spacing[axis] * spacing[axis];
        for mut lane in d.lanes_mut(ndarray::Axis(axis)) {
            let f: Vec<f64> = lane.to_vec();
            let mut out = vec![0.0; f.len()];
            edt_line(&f, w, &mut out, &mut v, &mut z);
            lane.iter_mut().zip(out).for_each(|(l, o)| *l = o);
        }
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    pub hd: f64,
    pub asd: f64,
}

/// Hausdorff and average symmetric surface distance, or `None` if either mask is empty.
pub fn surface_distances(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Result<Option<SurfaceDistances>> {
    same_shape(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    if !ba.iter().any(|&v| v) || !bb.iter().any(|&v| v) {
        return Ok(None);
    }
    let (da, db) = (squared_distance_map(&ba, spacing), squared_distance_map(&bb, spacing));
    let mut max2 = 0.0f64;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (surface, other) in [(&ba, &db), (&bb, &da)] {
        Zip::from(surface).and(other).for_each(|&s, &d2| {
            if s {
                max2 = max2.max(d2);
                sum += d2.sqrt();
                count += 1;
            }
        });
    }
    Ok(Some(SurfaceDistances {
        hd: max2.sqrt(),
        asd: sum / count as f64,
    }))
}

pub fn hd(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(a, b, spacing)?.map(|s| s.hd))
}

pub fn asd(a: &Array3<bool>, b: &Array3<bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    Ok(surface_distances(a, b, spacing)?.map(|s| s.asd))
}

/// Euclidean distance in mm between two voxel positions.
pub fn detection_distance(pred: [usize; 3], truth: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3)
        .map(|a| ((pred[a] as f64 - truth[a] as f64) * spacing[a]).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganMetrics {
    pub organ_id: u16,
    pub name: String,
    pub stratum: Stratum,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd_mm: Option<f64>,
    pub asd_mm: Option<f64>,
}

/// Per-organ metrics of one predicted label map against ground truth.
pub fn evaluate_case(pred: &LabelMap, truth: &LabelMap, catalog: &OarCatalog) -> Result<Vec<OrganMetrics>> {
    if pred.shape() != truth.shape() {
        return shape_err(format!("prediction {:?} vs truth {:?}", pred.shape(), truth.shape()));
    }
    let mut entries: Vec<_> = catalog.entries.iter().collect();
    entries.sort_by_key(|e| e.organ_id);
    entries
        .into_iter()
        .map(|e| {
            let (a, b) = (pred.mask(e.organ_id), truth.mask(e.organ_id));
            let sd = surface_distances(&a, &b, truth.spacing)?;
            Ok(OrganMetrics {
                organ_id: e.organ_id,
                name: e.name.clone(),
                stratum: e.stratum,
                dsc: dsc(&a, &b)?,
                hd_mm: sd.map(|s| s.hd),
                asd_mm: sd.map(|s| s.asd),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub organ: String,
    /// `None` for the all-organ row.
    pub stratum: Option<Stratum>,
    pub dsc: f64,
    pub hd_mm: Option<f64>,
    pub asd_mm: Option<f64>,
    /// Values that entered the distance means (undefined ones are left out).
    pub defined: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub organs: Vec<SummaryRow>,
    pub strata: Vec<SummaryRow>,
    pub overall: SummaryRow,
}

fn mean(v: impl Iterator<Item = f64>) -> (Option<f64>, usize) {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    ((n > 0).then(|| s / n as f64), n)
}

fn summarize(organ: &str, stratum: Option<Stratum>, rows: &[&SummaryRow]) -> SummaryRow {
    let (d, total) = mean(rows.iter().map(|r| r.dsc));
    let (h, defined) = mean(rows.iter().filter_map(|r| r.hd_mm));
    let (a, _) = mean(rows.iter().filter_map(|r| r.asd_mm));
    SummaryRow {
        organ: organ.into(),
        stratum,
        dsc: d.unwrap_or(f64::NAN),
        hd_mm: h,
        asd_mm: a,
        defined,
        total,
    }
}

impl MetricReport {
    /// Average each organ over cases, then strata over their organs, then all organs.
    pub fn from_cases(catalog: &OarCatalog, cases: &[Vec<OrganMetrics>]) -> Self {
        let mut entries: Vec<_> = catalog.entries.iter().collect();
        entries.sort_by_key(|e| e.organ_id);
        let organs: Vec<SummaryRow> = entries
            .iter()
            .map(|e| {
                let ms: Vec<&OrganMetrics> = cases.iter().flatten().filter(|m| m.organ_id == e.organ_id).collect();
                let (d, total) = mean(ms.iter().map(|m| m.dsc));
                let (h, defined) = mean(ms.iter().filter_map(|m| m.hd_mm));
                let (a, _) = mean(ms.iter().filter_map(|m| m.asd_mm));
                SummaryRow {
                    organ: e.name.clone(),
                    stratum: Some(e.stratum),
                    dsc: d.unwrap_or(f64::NAN),
                    hd_mm: h,
                    asd_mm: a,
                    defined,
                    total,
                }
            })
            .collect();
        let strata = Stratum::ALL
            .iter()
            .filter_map(|&s| {
                let rows: Vec<&SummaryRow> = organs.iter().filter(|r| r.stratum == Some(s)).collect();
                (!rows.is_empty()).then(|| summarize("mean", Some(s), &rows))
            })
            .collect();
        let all: Vec<&SummaryRow> = organs.iter().collect();
        let overall = summarize("mean", None, &all);
        Self {
            organs,
            strata,
            overall,
        }
    }

    /// `organ,stratum,dsc,hd_mm,asd_mm`; undefined distances are written as `UNDEFINED`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["organ", "stratum", "dsc", "hd_mm", "asd_mm"])?;
        let fmt = |v: Option<f64>| v.map_or_else(|| "UNDEFINED".to_string(), |x| format!("{x:.6}"));
        for r in self
            .organs
            .iter()
            .chain(&self.strata)
            .chain(std::iter::once(&self.overall))
        {
            let stratum = r.stratum.map_or("ALL", |s| s.name());
            w.write_record([
                r.organ.as_str(),
                stratum,
                &format!("{:.6}", r.dsc),
                &fmt(r.hd_mm),
                &fmt(r.asd_mm),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn mask(shape: (usize, usize, usize), on: &[[usize; 3]]) -> Array3<bool> {
        let mut m = Array3::from_elem(shape, false);
        for p in on {
            m[*p] = true;
        }
        m
    }

    #[test]
    fn dice_cases() {
        let a = mask((4, 4, 4), &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3]]);
        let b = mask((4, 4, 4), &[[0, 0, 0], [0, 0, 1], [1, 0, 2], [1, 0, 3]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        assert_eq!(dsc(&a, &b).unwrap(), 0.5);
        let e = mask((4, 4, 4), &[]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
        assert!(dsc(&a, &mask((4, 4, 3), &[])).is_err());
    }

    #[test]
    fn single_voxel_hausdorff() {
        let a = mask((8, 8, 2), &[[0, 0, 0]]);
        let b = mask((8, 8, 2), &[[3, 4, 0]]);
        assert_eq!(hd(&a, &b, [1.0; 3]).unwrap(), Some(5.0));
        assert_eq!(hd(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(asd(&a, &a, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd(&a, &mask((8, 8, 2), &[]), [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn detection_distance_uses_spacing() {
        assert_eq!(detection_distance([3, 3, 3], [3, 3, 3], [1.0; 3]), 0.0);
        assert!((detection_distance([0, 0, 0], [0, 0, 2], [1.0, 1.0, 1.9]) - 3.8).abs() < 1e-12);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let full = Array3::from_elem((3, 3, 3), true);
        let b = boundary(&full);
        assert!(!b[[1, 1, 1]]);
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
    }

    #[test]
    fn report_means_and_csv() {
        let cat = OarCatalog::reference();
        let truth = LabelMap::new(Array3::zeros((6, 6, 6)), 42, [1.0; 3], [0.0; 3]).unwrap();
        let mut pred = truth.clone();
        pred.data[[2, 2, 2]] = 1;
        let m = evaluate_case(&pred, &truth, &cat).unwrap();
        assert_eq!(m[0].dsc, 0.0);
        assert_eq!(m[1].dsc, 1.0);
        assert_eq!(m[0].hd_mm, None);
        let r = MetricReport::from_cases(&cat, &[m]);
        let anchor = &r.strata[0];
        assert!((anchor.dsc - 8.0 / 9.0).abs() < 1e-12);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("organ,stratum,dsc,hd_mm,asd_mm\nbrain_stem,ANCHOR,0.000000,UNDEFINED,UNDEFINED\n"));
        assert!(text
            .trim_end()
            .ends_with(&format!("mean,ALL,{:.6},UNDEFINED,UNDEFINED", 41.0 / 42.0)));
    }

    fn brute(a: &Array3<bool>, b: &Array3<bool>, sp: [f64; 3]) -> Option<(f64, f64)> {
        let pts = |m: &Array3<bool>| -> Vec<[f64; 3]> {
            boundary(m)
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|((x, y, z), _)| [x as f64 * sp[0], y as f64 * sp[1], z as f64 * sp[2]])
                .collect()
        };
        let (pa, pb) = (pts(a), pts(b));
        if pa.is_empty() || pb.is_empty() {
            return None;
        }
        let near = |p: &[f64; 3], set: &[[f64; 3]]| {
            set.iter()
                .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let da: Vec<f64> = pa.iter().map(|p| near(p, &pb)).collect();
        let db: Vec<f64> = pb.iter().map(|p| near(p, &pa)).collect();
        let hd = da.iter().chain(&db).cloned().fold(0.0, f64::max);
        let asd = (da.iter().sum::<f64>() + db.iter().sum::<f64>()) / (da.len() + db.len()) as f64;
        Some((hd, asd))
    }

    fn arb_pair() -> impl Strategy<Value = (Array3<bool>, Array3<bool>, [f64; 3])> {
        (1usize..7, 1usize..7, 1usize..7).prop_flat_map(|(x, y, z)| {
            let n = x * y * z;
            (
                proptest::collection::vec(proptest::bool::weighted(0.3), n),
                proptest::collection::vec(proptest::bool::weighted(0.3), n),
                proptest::array::uniform3(0.5f64..2.5),
            )
                .prop_map(move |(a, b, sp)| {
                    (
                        Array3::from_shape_vec((x, y, z), a).unwrap(),
                        Array3::from_shape_vec((x, y, z), b).unwrap(),
                        sp,
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force((a, b, sp) in arb_pair()) {
            let fast = surface_distances(&a, &b, sp).unwrap();
            match (fast, brute(&a, &b, sp)) {
                (None, None) => {}
                (Some(f), Some((h, s))) => {
                    prop_assert!((f.hd - h).abs() <= 1e-9 * h.max(1.0));
                    prop_assert!((f.asd - s).abs() <= 1e-9 * s.max(1.0));
                    prop_assert!(f.asd <= f.hd + 1e-12);
                }
                other => prop_assert!(false, "{:?}", other),
            }
        }

        #[test]
        fn symmetric_and_scale_with_spacing((a, b, sp) in arb_pair()) {
            prop_assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
            let ab = surface_distances(&a, &b, sp).unwrap();
            let ba = surface_distances(&b, &a, sp).unwrap();
            let doubled = surface_distances(&a, &b, sp.map(|s| 2.0 * s)).unwrap();
            if let (Some(x), Some(y), Some(z)) = (ab, ba, doubled) {
                prop_assert!((x.hd - y.hd).abs() < 1e-12);
                prop_assert!((x.asd - y.asd).abs() < 1e-9);
                prop_assert!((z.hd - 2.0 * x.hd).abs() < 1e-9);
                prop_assert!((z.asd - 2.0 * x.asd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn concentric_cubes_against_brute_force() {
        let cube = |lo: usize, hi: usize| {
            Array3::from_shape_fn((7, 7, 7), |(x, y, z)| [x, y, z].iter().all(|&v| v >= lo && v < hi))
        };
        let (inner, outer) = (cube(2, 5), cube(1, 6));
        let f = surface_distances(&inner, &outer, [1.0; 3]).unwrap().unwrap();
        let (h, s) = brute(&inner, &outer, [1.0; 3]).unwrap();
        assert_eq!(f.hd, h);
        assert!((f.asd - s).abs() < 1e-12);
    }
}
