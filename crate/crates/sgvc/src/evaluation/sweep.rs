//! Rate-quality sweeps over a tradeoff grid with the real bitstream.

use crate::codec::{compress, decompress, ModelState};
use crate::error::{Error, Result};
use crate::evaluation::bd::{RdCurve, RdPoint};
use crate::evaluation::metrics::{ms_ssim, msssim_db, psnr};
use ndarray::Array3;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QualityMetric {
    Psnr,
    MsssimDb,
}

impl QualityMetric {
    pub fn name(&self) -> &'static str {
        match self {
            QualityMetric::Psnr => "psnr",
            QualityMetric::MsssimDb => "msssim_db",
        }
    }
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "psnr" => Ok(QualityMetric::Psnr),
            "msssim_db" => Ok(QualityMetric::MsssimDb),
            other => Err(Error::config(format!(
                "unknown quality metric '{other}', expected psnr or msssim_db"
            ))),
        }
    }
}

/// Per-image measurement at one tradeoff.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub lambda: f64,
    pub image_index: usize,
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim_db: f64,
}

/// Compress and decode every image at one tradeoff; bpp comes from the real
/// container bytes.
pub fn eval_lambda(
    model: &ModelState,
    images: &[Array3<f32>],
    lambda: f64,
) -> Result<Vec<EvalRow>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let bytes = compress(model, img, lambda)?;
            let decoded = decompress(model, &bytes)?;
            let (h, w, _) = img.dim();
            let bpp = (bytes.len() * 8) as f64 / (h * w) as f64;
            Ok(EvalRow {
                lambda,
                image_index: i,
                bpp,
                psnr_db: psnr(img, &decoded)?,
                msssim_db: msssim_db(ms_ssim(img, &decoded)?),
            })
        })
        .collect()
}

/// One averaged rate-quality point per tradeoff value. Duplicate tradeoffs
/// are dropped with a warning.
pub fn sweep_rd(
    model: &ModelState,
    images: &[Array3<f32>],
    lambdas: &[f64],
    metric: QualityMetric,
) -> Result<RdCurve> {
    if images.is_empty() {
        return Err(Error::data("empty evaluation image set"));
    }
    let mut grid: Vec<f64> = Vec::new();
    for &l in lambdas {
        if grid.iter().any(|g| (g - l).abs() < f64::EPSILON) {
            log::warn!("duplicate tradeoff value {l} dropped from the sweep grid");
        } else {
            grid.push(l);
        }
    }
    let mut points = Vec::new();
    for &lambda in &grid {
        let rows = eval_lambda(model, images, lambda)?;
        let n = rows.len() as f64;
        let bpp = rows.iter().map(|r| r.bpp).sum::<f64>() / n;
        let quality = match metric {
            QualityMetric::Psnr => rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            QualityMetric::MsssimDb => rows.iter().map(|r| r.msssim_db).sum::<f64>() / n,
        };
        points.push(RdPoint {
            label: format!("lambda={lambda}"),
            bpp,
            quality,
        });
    }
    RdCurve::new("sweep", points)
}

/// Averages of a sweep as (lambda, bpp, quality) triples in grid order,
/// before any bpp sorting. Used by trend checks.
pub fn sweep_averages(
    model: &ModelState,
    images: &[Array3<f32>],
    lambdas: &[f64],
) -> Result<Vec<(f64, f64, f64)>> {
    if images.is_empty() {
        return Err(Error::data("empty evaluation image set"));
    }
    let mut out = Vec::new();
    for &lambda in lambdas {
        let rows = eval_lambda(model, images, lambda)?;
        let n = rows.len() as f64;
        let bpp = rows.iter().map(|r| r.bpp).sum::<f64>() / n;
        let q = rows.iter().map(|r| r.psnr_db).sum::<f64>() / n;
        out.push((lambda, bpp, q));
    }
    Ok(out)
}
