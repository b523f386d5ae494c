//! NIfTI-1 reading and writing with a diagonal affine (spacing on the diagonal,
//! origin in the translation column).

use std::path::Path;

use ndarray::{Array3, Ix3, IxDyn};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use crate::error::{Error, Result};
use crate::model::{LabelMap, OarCatalog, Volume};

fn check_extension(path: &Path) -> Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    if name.ends_with(".nii") || name.ends_with(".nii.gz") {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "{} is not a .nii or .nii.gz file",
            path.display()
        )))
    }
}

struct Geometry {
    spacing: [f64; 3],
    origin: [f64; 3],
}

fn geometry(h: &NiftiHeader) -> Result<Geometry> {
    let spacing = [h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64];
    if !spacing.iter().all(|&s| s.is_finite() && s > 0.0) {
        return Err(Error::InvalidValue(format!(
            "non-positive voxel spacing {spacing:?} in header"
        )));
    }
    let origin = if h.sform_code > 0 {
        [h.srow_x[3] as f64, h.srow_y[3] as f64, h.srow_z[3] as f64]
    } else {
        [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64]
    };
    Ok(Geometry { spacing, origin })
}

fn read_grid(path: &Path) -> Result<(Array3<f64>, Geometry)> {
    check_extension(path)?;
    let obj = ReaderOptions::new().read_file(path)?;
    let geo = geometry(obj.header())?;
    let arr = obj.into_volume().into_ndarray::<f64>()?;
    let arr = drop_trailing_unit_axes(arr)?;
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok((arr.as_standard_layout().into_owned(), geo))
}

fn drop_trailing_unit_axes(mut a: ndarray::Array<f64, IxDyn>) -> Result<ndarray::Array<f64, IxDyn>> {
    while a.ndim() > 3 && a.shape()[a.ndim() - 1] == 1 {
        let last = a.ndim() - 1;
        a = a.index_axis_move(ndarray::Axis(last), 0);
    }
    if a.ndim() != 3 {
        return Err(Error::Format(format!(
            "expected a 3-D image, got shape {:?}",
            a.shape()
        )));
    }
    Ok(a)
}

fn header_for(spacing: [f64; 3], origin: [f64; 3]) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    h.pixdim = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    h.xyzt_units = 2; // millimetres
    h.sform_code = 1;
    h.srow_x = [spacing[0] as f32, 0.0, 0.0, origin[0] as f32];
    h.srow_y = [0.0, spacing[1] as f32, 0.0, origin[1] as f32];
    h.srow_z = [0.0, 0.0, spacing[2] as f32, origin[2] as f32];
    h.qform_code = 1;
    h.quatern_b = 0.0;
    h.quatern_c = 0.0;
    h.quatern_d = 0.0;
    h.quatern_x = origin[0] as f32;
    h.quatern_y = origin[1] as f32;
    h.quatern_z = origin[2] as f32;
    h
}

/// Intensity image. Values are returned as stored (raw HU for CT).
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (arr, geo) = read_grid(path)?;
    Volume::new(arr.mapv(|v| v as f32), geo.spacing, geo.origin)
}

/// Label image, checked against the catalog when one is given.
pub fn load_labels(path: &Path, catalog: Option<&OarCatalog>) -> Result<LabelMap> {
    let (arr, geo) = read_grid(path)?;
    let mut max = 0u16;
    let mut data = Array3::<u16>::zeros(arr.raw_dim());
    for (d, &v) in data.iter_mut().zip(arr.iter()) {
        if v < 0.0 || v.fract() != 0.0 || v > u16::MAX as f64 {
            return Err(Error::InvalidValue(format!(
                "{}: {v} is not a label id",
                path.display()
            )));
        }
        *d = v as u16;
        max = max.max(*d);
    }
    let class_count = catalog.map_or(max, |c| c.len() as u16);
    if let Some(c) = catalog {
        if max > class_count {
            return Err(Error::Catalog(format!(
                "{}: label id {max} is not in the catalog (1..={})",
                path.display(),
                c.len()
            )));
        }
    }
    LabelMap::new(data, class_count, geo.spacing, geo.origin)
}

/// Volume plus its label map when the label file exists.
pub fn load_case(ct: &Path, labels: Option<&Path>, catalog: Option<&OarCatalog>) -> Result<(Volume, Option<LabelMap>)> {
    let vol = load_volume(ct)?;
    let lab = match labels {
        Some(p) => {
            let l = load_labels(p, catalog)?;
            if l.shape() != vol.shape() {
                return Err(Error::Shape(format!(
                    "labels {:?} do not match volume {:?}",
                    l.shape(),
                    vol.shape()
                )));
            }
            Some(l)
        }
        None => None,
    };
    Ok((vol, lab))
}

pub fn save_volume(vol: &Volume, path: &Path) -> Result<()> {
    check_extension(path)?;
    let h = header_for(vol.spacing, vol.origin);
    WriterOptions::new(path).reference_header(&h).write_nifti(&vol.data)?;
    Ok(())
}

pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    check_extension(path)?;
    let h = header_for(labels.spacing, labels.origin);
    WriterOptions::new(path)
        .reference_header(&h)
        .write_nifti(&labels.data)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{OrganEntry, Stratum};

    fn catalog(n: u16) -> OarCatalog {
        OarCatalog::new(
            (1..=n)
                .map(|i| OrganEntry {
                    organ_id: i,
                    name: format!("o{i}"),
                    stratum: Stratum::Anchor,
                    max_extent_mm: [10.0; 3],
                    merge_group: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_data_and_spacing() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::from_shape_fn((5, 4, 3), |(x, y, z)| (x * 100 + y * 10 + z) as f32 - 300.5);
        let vol = Volume::new(data, [0.95, 0.95, 1.9], [-12.0, 3.5, 40.0]).unwrap();
        for name in ["ct.nii", "ct.nii.gz"] {
            let p = dir.path().join(name);
            save_volume(&vol, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data, vol.data);
            for a in 0..3 {
                assert!((back.spacing[a] - vol.spacing[a]).abs() < 1e-6);
                assert!((back.origin[a] - vol.origin[a]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn labels_outside_catalog_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::<u16>::zeros((4, 4, 4));
        data[[1, 1, 1]] = 99;
        let lm = LabelMap::new(data, 99, [1.0; 3], [0.0; 3]).unwrap();
        let p = dir.path().join("lab.nii.gz");
        save_labels(&lm, &p).unwrap();
        assert!(matches!(load_labels(&p, Some(&catalog(3))), Err(Error::Catalog(_))));
        assert_eq!(load_labels(&p, None).unwrap().data, lm.data);
    }

    #[test]
    fn unknown_extension_is_rejected() {
        assert!(matches!(load_volume(Path::new("scan.mha")), Err(Error::Format(_))));
    }
}
