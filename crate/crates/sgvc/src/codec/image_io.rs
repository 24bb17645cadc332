//! Image loading and saving. PNG and binary PPM come in, PNG goes out.
//! Pixels are RGB in [0, 1], shaped (H, W, 3).

use crate::error::{Error, Result};
use image::ImageReader;
use ndarray::Array3;
use std::path::Path;

pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::data(format!("cannot open image {}: {e}", path.display())))?;
    let img = reader
        .decode()
        .map_err(|e| Error::data(format!("cannot decode image {}: {e}", path.display())))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut out = Array3::zeros((h as usize, w as usize, 3));
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_png(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 3 {
        return Err(Error::config(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in buf.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[(y as usize, x as usize, ch)].clamp(0.0, 1.0);
            p.0[ch] = (v * 255.0).round() as u8;
        }
    }
    buf.save(path)
        .map_err(|e| Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
