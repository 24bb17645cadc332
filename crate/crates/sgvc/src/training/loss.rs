//! The rate-distortion objective.

use crate::error::{Error, Result};
use crate::evaluation::metrics::{ms_ssim, ms_ssim_with_grad, mse};
use crate::training::Metric;
use ndarray::Array3;

/// Distortion weight for squared error on [0, 1] images; the conventional
/// 8-bit scaling that places the default tradeoff range in its usual
/// operating regime.
pub const MSE_SCALE: f64 = 255.0 * 255.0;

/// `bpp + lambda * D`, where D is `255^2 * MSE` or `1 - MS-SSIM`.
pub fn rd_loss(
    x: &Array3<f32>,
    x_hat: &Array3<f32>,
    bpp: f64,
    lambda: f64,
    metric: Metric,
) -> Result<f64> {
    if x.dim() != x_hat.dim() {
        return Err(Error::config(format!(
            "loss needs matching shapes, got {:?} and {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let d = match metric {
        Metric::Mse => MSE_SCALE * mse(x, x_hat)?,
        Metric::Msssim => 1.0 - ms_ssim(x, x_hat)?,
    };
    Ok(bpp + lambda * d)
}

/// Distortion value and its gradient w.r.t. the reconstruction.
pub fn distortion_with_grad(
    x: &Array3<f32>,
    x_hat: &Array3<f32>,
    metric: Metric,
) -> Result<(f64, Array3<f32>)> {
    match metric {
        Metric::Mse => {
            let m = mse(x, x_hat)?;
            let n = x.len() as f64;
            let coef = (MSE_SCALE * 2.0 / n) as f32;
            let mut g = x_hat.clone();
            g.zip_mut_with(x, |a, b| *a = coef * (*a - *b));
            Ok((MSE_SCALE * m, g))
        }
        Metric::Msssim => {
            let (v, g) = ms_ssim_with_grad(x, x_hat)?;
            Ok((1.0 - v, g.mapv(|e| -e)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn worked_example() {
        // bpp 1.0, mse 1e-4, lambda 0.0016 -> 1.0 + 0.0016 * 65025 * 1e-4
        let x = Array3::from_elem((10, 10, 3), 0.5f32);
        let x_hat = Array3::from_elem((10, 10, 3), 0.5f32 + 0.01);
        let l = rd_loss(&x, &x_hat, 1.0, 0.0016, Metric::Mse).unwrap();
        assert!((l - 1.010404).abs() < 1e-6, "{l}");
    }

    #[test]
    fn perfect_reconstruction_leaves_only_rate() {
        let x = Array3::from_shape_fn((32, 32, 3), |(i, j, k)| {
            ((i * 7 + j * 3 + k) % 100) as f32 / 100.0
        });
        let l = rd_loss(&x, &x, 0.7, 0.01, Metric::Mse).unwrap();
        assert_eq!(l, 0.7);
        let l2 = rd_loss(&x, &x, 0.7, 20.0, Metric::Msssim).unwrap();
        assert!((l2 - 0.7).abs() < 1e-9, "{l2}");
    }

    #[test]
    fn zero_lambda_reduces_to_rate() {
        let x = Array3::from_elem((16, 16, 3), 0.3f32);
        let y = Array3::from_elem((16, 16, 3), 0.9f32);
        let l = rd_loss(&x, &y, 1.25, 0.0, Metric::Mse).unwrap();
        assert_eq!(l, 1.25);
    }

    #[test]
    fn mse_gradient_is_analytic() {
        let x = Array3::from_elem((4, 4, 3), 0.25f32);
        let y = Array3::from_elem((4, 4, 3), 0.75f32);
        let (d, g) = distortion_with_grad(&x, &y, Metric::Mse).unwrap();
        assert!((d - MSE_SCALE * 0.25).abs() < 1e-3);
        let expect = (MSE_SCALE * 2.0 * 0.5 / 48.0) as f32;
        assert!(g.iter().all(|v| (*v - expect).abs() < 1e-3));
    }
}
