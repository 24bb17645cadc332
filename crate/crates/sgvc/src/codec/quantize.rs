//! Quantization: rounding at inference, additive uniform noise as the
//! training surrogate.

use ndarray::Array3;
use rand::Rng;

/// Round half away from zero, elementwise.
pub fn quantize_infer(v: &Array3<f32>) -> Array3<f32> {
    v.mapv(f32::round)
}

/// Add i.i.d. uniform noise in [-0.5, 0.5).
pub fn quantize_train<R: Rng>(v: &Array3<f32>, rng: &mut R) -> Array3<f32> {
    v.mapv(|x| x + rng.gen_range(-0.5f32..0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding_is_half_away_from_zero() {
        let v = ndarray::arr1(&[1.4f32, 1.5, -1.5, 0.0, -0.49, 2.5])
            .into_shape_with_order((1, 1, 6))
            .unwrap();
        let q = quantize_infer(&v);
        let expect = [1.0f32, 2.0, -2.0, 0.0, 0.0, 3.0];
        for (a, b) in q.iter().zip(expect.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn training_noise_is_uniform_half_wide() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let v = Array3::<f32>::zeros((100, 100, 100));
        let q = quantize_train(&v, &mut rng);
        let mut sum_abs = 0.0f64;
        for (orig, noisy) in v.iter().zip(q.iter()) {
            let d = noisy - orig;
            assert!((-0.5..0.5).contains(&d), "noise {d} out of range");
            sum_abs += d.abs() as f64;
        }
        let mean_abs = sum_abs / v.len() as f64;
        assert!((mean_abs - 0.25).abs() < 0.01, "mean |noise| {mean_abs}");
    }
}
