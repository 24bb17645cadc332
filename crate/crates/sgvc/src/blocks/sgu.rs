//! Spatial gating unit.
//!
//! Two parallel 3x3 branches read the stage features: one is squashed through
//! a 1x1 conv and a sigmoid into a per-pixel importance mask, the other is
//! gated by that mask and added back onto the input.

use crate::blocks::act::sigmoid;
use crate::blocks::conv::Conv2d;
use crate::blocks::{FeatureMap, ImportanceMask};
use crate::error::Result;
use ndarray::Array3;
use rand::Rng;

/// Keeps the stored mask inside the open interval even where the sigmoid
/// saturates in single precision.
const MASK_EPS: f32 = 1e-6;

#[derive(Debug, Clone)]
pub struct SguParams {
    pub mask_conv3: Conv2d,
    pub mask_conv1: Conv2d,
    pub gate_conv3: Conv2d,
}

impl SguParams {
    pub fn zeros(channels: usize) -> Self {
        SguParams {
            mask_conv3: Conv2d::zeros(3, channels, channels, 1, 1),
            mask_conv1: Conv2d::zeros(1, channels, channels, 1, 0),
            gate_conv3: Conv2d::zeros(3, channels, channels, 1, 1),
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        SguParams {
            mask_conv3: Conv2d::init(3, channels, channels, 1, 1, rng),
            mask_conv1: Conv2d::init(1, channels, channels, 1, 0, rng),
            gate_conv3: Conv2d::init(3, channels, channels, 1, 1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.mask_conv3.c_in()
    }
}

pub struct SguCache {
    pub x: Array3<f32>,
    /// mask branch 3x3 output (input of the 1x1 conv)
    pub t: Array3<f32>,
    pub mask: Array3<f32>,
    /// gate branch 3x3 output
    pub g: Array3<f32>,
}

/// Gated features and the importance mask for the stage input `f`.
pub fn sgu_forward(f: &FeatureMap, params: &SguParams) -> Result<(FeatureMap, ImportanceMask)> {
    let (f_g, mask, _) = sgu_forward_cached(f, params)?;
    Ok((f_g, mask))
}

pub fn sgu_forward_cached(
    f: &FeatureMap,
    params: &SguParams,
) -> Result<(FeatureMap, ImportanceMask, SguCache)> {
    let t = params.mask_conv3.forward(f)?;
    let u = params.mask_conv1.forward(&t)?;
    let mask = u.mapv(|v| sigmoid(v).clamp(MASK_EPS, 1.0 - MASK_EPS));
    let g = params.gate_conv3.forward(f)?;
    let f_g = &mask * &g + f;
    let cache = SguCache {
        x: f.clone(),
        t,
        mask: mask.clone(),
        g,
    };
    Ok((f_g, mask, cache))
}

/// `g_out` is the gradient w.r.t. the gated features, `g_mask` the gradient
/// flowing back into the mask from downstream consumers (the scaling network).
pub fn sgu_backward(
    params: &SguParams,
    cache: &SguCache,
    g_out: &Array3<f32>,
    g_mask: Option<&Array3<f32>>,
    grads: &mut SguParams,
) -> Array3<f32> {
    let mut gm = g_out * &cache.g;
    if let Some(extra) = g_mask {
        gm += extra;
    }
    // through the sigmoid
    let gu = &gm * &(cache.mask.mapv(|m| m * (1.0 - m)));
    let gg = g_out * &cache.mask;
    let gx_gate = params.gate_conv3.backward(&cache.x, &gg, &mut grads.gate_conv3);
    let gt = params.mask_conv1.backward(&cache.t, &gu, &mut grads.mask_conv1);
    let gx_mask = params.mask_conv3.backward(&cache.x, &gt, &mut grads.mask_conv3);
    gx_gate + gx_mask + g_out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_everything_gives_half_mask_and_zero_output() {
        let p = SguParams::zeros(1);
        let f = Array3::zeros((1, 1, 1));
        let (f_g, mask) = sgu_forward(&f, &p).unwrap();
        assert_eq!(mask[(0, 0, 0)], 0.5);
        assert_eq!(f_g[(0, 0, 0)], 0.0);
    }

    #[test]
    fn zero_gate_branch_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = SguParams::init(3, &mut rng);
        p.gate_conv3 = Conv2d::zeros(3, 3, 3, 1, 1);
        let f = Array3::from_shape_simple_fn((5, 4, 3), || rng.gen_range(-2.0..2.0f32));
        let (f_g, _) = sgu_forward(&f, &p).unwrap();
        assert_eq!(f_g, f);
    }

    #[test]
    fn scalar_instance_matches_hand_computation() {
        // 1x1 input 0.5; mask branch weights 1 and 1, gate branch weight 2
        let mut p = SguParams::zeros(1);
        p.mask_conv3.weight[(1, 1, 0, 0)] = 1.0;
        p.mask_conv1.weight[(0, 0, 0, 0)] = 1.0;
        p.gate_conv3.weight[(1, 1, 0, 0)] = 2.0;
        let f = Array3::from_elem((1, 1, 1), 0.5f32);
        let (f_g, mask) = sgu_forward(&f, &p).unwrap();
        assert!((mask[(0, 0, 0)] - 0.622459).abs() < 1e-5);
        assert!((f_g[(0, 0, 0)] - 1.122459).abs() < 1e-5);
    }

    #[test]
    fn mask_entries_stay_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = SguParams::init(4, &mut rng);
        for _ in 0..50 {
            let f = Array3::from_shape_simple_fn((6, 6, 4), || rng.gen_range(-50.0..50.0f32));
            let (_, mask) = sgu_forward(&f, &p).unwrap();
            assert!(mask.iter().all(|&m| m > 0.0 && m < 1.0));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = SguParams::init(2, &mut rng);
        let f = Array3::from_shape_simple_fn((4, 4, 2), || rng.gen_range(-1.0..1.0f32));
        let w_out = Array3::from_shape_simple_fn((4, 4, 2), || rng.gen_range(-1.0..1.0f32));
        let w_mask = Array3::from_shape_simple_fn((4, 4, 2), || rng.gen_range(-1.0..1.0f32));
        let loss = |p: &SguParams, f: &Array3<f32>| -> f64 {
            let (f_g, m) = sgu_forward(f, p).unwrap();
            let a: f64 = f_g.iter().zip(w_out.iter()).map(|(x, w)| (*x * *w) as f64).sum();
            let b: f64 = m.iter().zip(w_mask.iter()).map(|(x, w)| (*x * *w) as f64).sum();
            a + b
        };
        let (_, _, cache) = sgu_forward_cached(&f, &p).unwrap();
        let mut grads = SguParams::zeros(2);
        let gx = sgu_backward(&p, &cache, &w_out, Some(&w_mask), &mut grads);
        let h = 1e-3f32;
        for idx in [(0usize, 0usize, 0usize), (1, 2, 1), (3, 3, 0)] {
            let mut fp = f.clone();
            fp[idx] += h;
            let up = loss(&p, &fp);
            fp[idx] = f[idx] - h;
            let dn = loss(&p, &fp);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = gx[idx] as f64;
            assert!(
                (an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()),
                "input grad {an} vs {fd}"
            );
        }
        for idx in [(0usize, 0usize, 0usize, 0usize), (2, 1, 1, 1)] {
            let mut pp = p.clone();
            pp.gate_conv3.weight[idx] += h;
            let up = loss(&pp, &f);
            pp.gate_conv3.weight[idx] = p.gate_conv3.weight[idx] - h;
            let dn = loss(&pp, &f);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = grads.gate_conv3.weight[idx] as f64;
            assert!(
                (an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()),
                "gate grad {an} vs {fd}"
            );
        }
    }
}
