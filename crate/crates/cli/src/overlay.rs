//! PNG previews: the middle axial slice of the preprocessed CT with labels tinted.

use std::path::Path;

use anyhow::Result;
use image::{Rgb, RgbImage};

use stratoseg::{LabelMap, Volume};

fn color(label: u16) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [230.0, 25.0, 75.0],
        [60.0, 180.0, 75.0],
        [255.0, 225.0, 25.0],
        [0.0, 130.0, 200.0],
        [245.0, 130.0, 48.0],
        [145.0, 30.0, 180.0],
        [70.0, 240.0, 240.0],
        [240.0, 50.0, 230.0],
    ];
    PALETTE[(label as usize - 1) % PALETTE.len()]
}

/// `x` is expected in [0, 1]. Image rows run along y, columns along x.
pub fn write_overlay(x: &Volume, labels: &LabelMap, path: &Path) -> Result<()> {
    let [nx, ny, nz] = x.shape();
    let z = nz / 2;
    let mut img = RgbImage::new(nx as u32, ny as u32);
    for i in 0..nx {
        for j in 0..ny {
            let g = x.data[[i, j, z]].clamp(0.0, 1.0) * 255.0;
            let px = match labels.data[[i, j, z]] {
                0 => [g; 3],
                l => {
                    let c = color(l);
                    [0, 1, 2].map(|k| 0.5 * g + 0.5 * c[k])
                }
            };
            img.put_pixel(i as u32, j as u32, Rgb(px.map(|v| v.round() as u8)));
        }
    }
    img.save(path)?;
    Ok(())
}
