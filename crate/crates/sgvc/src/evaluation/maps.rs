//! Scale-factor and bit-allocation visualization.

use crate::codec::{compress_with_info, ModelState};
use crate::error::Result;
use crate::evaluation::plot::{save_heatmap, save_matrix_csv};
use ndarray::{Array2, Array3};
use std::path::{Path, PathBuf};

/// Per-stage scale-factor snapshots plus the per-pixel bit-allocation map.
/// The bit map lives at the padded image resolution, so its entries sum to
/// the total model bits of the quantized latent exactly.
pub struct HeatmapBundle {
    pub sf_maps: Vec<Array3<f32>>,
    pub bit_map: Array2<f64>,
    pub total_latent_bits: f64,
}

pub fn compute_maps(
    model: &ModelState,
    image: &Array3<f32>,
    lambda: f64,
) -> Result<HeatmapBundle> {
    let (_, info) = compress_with_info(model, image, lambda)?;
    let (lh, lw, _) = info.latent_bits.dim();
    let factor = model.config.spatial_factor();
    let cell = (factor * factor) as f64;
    let mut bit_map = Array2::zeros((lh * factor, lw * factor));
    for i in 0..lh {
        for j in 0..lw {
            let mut bits = 0.0f64;
            for k in 0..info.latent_bits.dim().2 {
                bits += info.latent_bits[(i, j, k)];
            }
            let per_pixel = bits / cell;
            for di in 0..factor {
                for dj in 0..factor {
                    bit_map[(i * factor + di, j * factor + dj)] = per_pixel;
                }
            }
        }
    }
    Ok(HeatmapBundle {
        sf_maps: info.sf_maps,
        bit_map,
        total_latent_bits: info.total_latent_bits,
    })
}

/// Computes the maps and writes false-color PNGs plus raw CSV sidecars.
/// Returns the bundle and every path written.
pub fn dump_maps(
    model: &ModelState,
    image: &Array3<f32>,
    lambda: f64,
    out_dir: &Path,
) -> Result<(HeatmapBundle, Vec<PathBuf>)> {
    std::fs::create_dir_all(out_dir)?;
    let bundle = compute_maps(model, image, lambda)?;
    let mut written = Vec::new();
    for (i, sf) in bundle.sf_maps.iter().enumerate() {
        let (h, w, _) = sf.dim();
        let as2 = Array2::from_shape_fn((h, w), |(a, b)| sf[(a, b, 0)] as f64);
        let png = out_dir.join(format!("scale_factors_stage{}.png", i + 1));
        let csv = out_dir.join(format!("scale_factors_stage{}.csv", i + 1));
        save_heatmap(&png, &as2)?;
        save_matrix_csv(&csv, &as2)?;
        written.push(png);
        written.push(csv);
    }
    let png = out_dir.join("bit_allocation.png");
    let csv = out_dir.join("bit_allocation.csv");
    save_heatmap(&png, &bundle.bit_map)?;
    save_matrix_csv(&csv, &bundle.bit_map)?;
    written.push(png);
    written.push(csv);
    Ok((bundle, written))
}
