//! Presentation output: rate-quality curve plots and false-color heatmaps.
//! The CSV sidecars are the contract; these images are for eyeballs.

use crate::error::Result;
use crate::evaluation::bd::RdCurve;
use ndarray::Array2;
use std::path::Path;

const CURVE_COLORS: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
    [255, 127, 14],
    [23, 190, 207],
];

/// Small fixed colormap (dark blue through green to yellow).
pub fn false_color(t: f32) -> [u8; 3] {
    let anchors: [(f32, [f32; 3]); 5] = [
        (0.0, [68.0, 1.0, 84.0]),
        (0.25, [59.0, 82.0, 139.0]),
        (0.5, [33.0, 145.0, 140.0]),
        (0.75, [94.0, 201.0, 98.0]),
        (1.0, [253.0, 231.0, 37.0]),
    ];
    let t = t.clamp(0.0, 1.0);
    for w in anchors.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let a = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
            return [
                (c0[0] + a * (c1[0] - c0[0])) as u8,
                (c0[1] + a * (c1[1] - c0[1])) as u8,
                (c0[2] + a * (c1[2] - c0[2])) as u8,
            ];
        }
    }
    [253, 231, 37]
}

/// Writes a heatmap PNG normalized to the value range of `map`.
pub fn save_heatmap(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let t = ((map[(y as usize, x as usize)] - lo) / span) as f32;
        p.0 = false_color(t);
    }
    img.save(path)
        .map_err(|e| crate::error::Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Writes the raw numeric matrix as CSV rows.
pub fn save_matrix_csv(path: &Path, map: &Array2<f64>) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in map.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    Ok(())
}

/// Simple scatter-and-line plot of one or more rate-quality curves.
pub fn save_rd_plot(path: &Path, curves: &[&RdCurve], quality_label: &str) -> Result<()> {
    let (w, h) = (640u32, 480u32);
    let (ml, mr, mt, mb) = (60i64, 20i64, 20i64, 40i64);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let xs: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.bpp))
        .collect();
    let ys: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.quality))
        .collect();
    if xs.is_empty() {
        img.save(path)
            .map_err(|e| crate::error::Error::data(e.to_string()))?;
        return Ok(());
    }
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |bpp: f64| -> i64 {
        ml + ((bpp - x0) / (x1 - x0) * (w as i64 - ml - mr) as f64) as i64
    };
    let py = |q: f64| -> i64 {
        (h as i64 - mb) - ((q - y0) / (y1 - y0) * (h as i64 - mt - mb) as f64) as i64
    };
    // axes
    for x in ml..(w as i64 - mr) {
        put(&mut img, x, h as i64 - mb, [0, 0, 0]);
    }
    for y in mt..(h as i64 - mb) {
        put(&mut img, ml, y, [0, 0, 0]);
    }
    let _ = quality_label;
    for (ci, curve) in curves.iter().enumerate() {
        let color = CURVE_COLORS[ci % CURVE_COLORS.len()];
        let pts: Vec<(i64, i64)> = curve
            .points
            .iter()
            .map(|p| (px(p.bpp), py(p.quality)))
            .collect();
        for wpair in pts.windows(2) {
            line(&mut img, wpair[0], wpair[1], color);
        }
        for &(x, y) in &pts {
            for dx in -2i64..=2 {
                for dy in -2i64..=2 {
                    put(&mut img, x + dx, y + dy, color);
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| crate::error::Error::data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn span(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn put(img: &mut image::RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn line(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = a.0 + ((b.0 - a.0) as f64 * t) as i64;
        let y = a.1 + ((b.1 - a.1) as f64 * t) as i64;
        put(img, x, y, c);
    }
}
