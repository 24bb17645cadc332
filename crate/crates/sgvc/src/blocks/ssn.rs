//! Spatial scaling network and its two input builders.
//!
//! The mask is averaged over channels into a one-channel spatial importance
//! map, the rate-distortion tradeoff is tiled into a constant map of the same
//! size, and a shared per-pixel MLP (2 -> 64 -> 1) turns the pair into a
//! strictly positive scale factor through an exponential.

use crate::blocks::act::{relu, relu_grad};
use crate::blocks::linear::Linear;
use crate::blocks::{ImportanceMask, RdMap, ScaleFactorMap, SpatialImportanceMap};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Axis};
use rand::Rng;

pub const SSN_HIDDEN: usize = 64;
/// Pre-exponential clamp; keeps scale factors positive and finite in f32.
const PRE_EXP_CLAMP: f32 = 20.0;

#[derive(Debug, Clone)]
pub struct SsnParams {
    pub hidden: Linear,
    pub output: Linear,
}

impl SsnParams {
    pub fn zeros() -> Self {
        SsnParams {
            hidden: Linear::zeros(2, SSN_HIDDEN),
            output: Linear::zeros(SSN_HIDDEN, 1),
        }
    }

    /// Hidden layer gets the usual fan-in init; the output layer starts at
    /// zero so a fresh network scales by exactly one everywhere.
    ///
    /// `rd_scale` boosts the weights on the tradeoff input. The rd map
    /// carries the raw tradeoff value, which sits orders of magnitude below
    /// the importance input, so its weight column starts at a scale where
    /// different tradeoffs are resolvable from the first updates. Passing
    /// 1.0 gives the plain fan-in init.
    pub fn init<R: Rng>(rng: &mut R, rd_scale: f32) -> Self {
        let mut hidden = Linear::init(2, SSN_HIDDEN, rng);
        for v in hidden.weight.row_mut(1).iter_mut() {
            *v *= rd_scale;
        }
        SsnParams {
            hidden,
            output: Linear::zeros(SSN_HIDDEN, 1),
        }
    }
}

/// Per-pixel mean over mask channels.
pub fn aggregate_mask(mask: &ImportanceMask) -> SpatialImportanceMap {
    let (h, w, n) = mask.dim();
    let out = mask.sum_axis(Axis(2)) / n as f32;
    out.into_shape_with_order((h, w, 1)).unwrap()
}

pub fn aggregate_mask_backward(g_si: &Array3<f32>, n: usize) -> Array3<f32> {
    let (h, w, _) = g_si.dim();
    let mut out = Array3::zeros((h, w, n));
    for i in 0..h {
        for j in 0..w {
            let v = g_si[(i, j, 0)] / n as f32;
            for k in 0..n {
                out[(i, j, k)] = v;
            }
        }
    }
    out
}

/// Tile a tradeoff value into an H x W x 1 map.
pub fn build_rd_map(lambda_val: f32, h: usize, w: usize) -> Result<RdMap> {
    if !(lambda_val > 0.0) || !lambda_val.is_finite() {
        return Err(Error::domain(format!(
            "rate-distortion tradeoff must be a positive finite value, got {lambda_val}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::domain("rd map needs positive spatial dims".to_string()));
    }
    Ok(Array3::from_elem((h, w, 1), lambda_val))
}

pub struct SsnCache {
    /// (H*W, 2) stacked inputs
    pub x2: Array2<f32>,
    /// hidden pre-activation
    pub pre_h: Array2<f32>,
    pub hid: Array2<f32>,
    /// output pre-exponential (after clamping)
    pub o: Array2<f32>,
    /// pre-clamp output, kept for the clamp mask
    pub o_raw: Array2<f32>,
    pub sf: Array3<f32>,
}

pub fn ssn_forward(
    si_map: &SpatialImportanceMap,
    rd_map: &RdMap,
    params: &SsnParams,
) -> Result<ScaleFactorMap> {
    Ok(ssn_forward_cached(si_map, rd_map, params)?.0)
}

pub fn ssn_forward_cached(
    si_map: &SpatialImportanceMap,
    rd_map: &RdMap,
    params: &SsnParams,
) -> Result<(ScaleFactorMap, SsnCache)> {
    let (h, w, _) = si_map.dim();
    if rd_map.dim() != (h, w, 1) || si_map.dim().2 != 1 {
        return Err(Error::config(format!(
            "scaling network inputs must both be {h}x{w}x1, got {:?} and {:?}",
            si_map.dim(),
            rd_map.dim()
        )));
    }
    let n = h * w;
    let mut x2 = Array2::zeros((n, 2));
    for i in 0..h {
        for j in 0..w {
            x2[(i * w + j, 0)] = si_map[(i, j, 0)];
            x2[(i * w + j, 1)] = rd_map[(i, j, 0)];
        }
    }
    let pre_h = params.hidden.forward(&x2);
    let hid = relu(&pre_h);
    let o_raw = params.output.forward(&hid);
    let o = o_raw.mapv(|v| v.clamp(-PRE_EXP_CLAMP, PRE_EXP_CLAMP));
    let sf_flat = o.mapv(f32::exp);
    let (v, _) = sf_flat.into_raw_vec_and_offset();
    let sf = Array3::from_shape_vec((h, w, 1), v).unwrap();
    let cache = SsnCache {
        x2,
        pre_h,
        hid,
        o,
        o_raw,
        sf: sf.clone(),
    };
    Ok((sf, cache))
}

/// Returns the gradient w.r.t. the spatial importance map. The rd map is a
/// constant conditioning input, so its gradient is dropped.
pub fn ssn_backward(
    params: &SsnParams,
    cache: &SsnCache,
    g_sf: &Array3<f32>,
    grads: &mut SsnParams,
) -> Array3<f32> {
    let (h, w, _) = g_sf.dim();
    let n = h * w;
    let mut go = Array2::zeros((n, 1));
    for i in 0..h {
        for j in 0..w {
            let r = i * w + j;
            let clipped = cache.o_raw[(r, 0)].abs() >= PRE_EXP_CLAMP;
            go[(r, 0)] = if clipped {
                0.0
            } else {
                g_sf[(i, j, 0)] * cache.sf[(i, j, 0)]
            };
        }
    }
    let gh = params.output.backward(&cache.hid, &go, &mut grads.output);
    let gpre = relu_grad(&cache.pre_h, &gh);
    let gx2 = params.hidden.backward(&cache.x2, &gpre, &mut grads.hidden);
    let mut g_si = Array3::zeros((h, w, 1));
    for i in 0..h {
        for j in 0..w {
            g_si[(i, j, 0)] = gx2[(i * w + j, 0)];
        }
    }
    g_si
}

/// Multiply every channel at (h, w) by the scale factor at (h, w).
pub fn apply_scale(f_g: &Array3<f32>, sf: &ScaleFactorMap) -> Result<Array3<f32>> {
    let (h, w, c) = f_g.dim();
    if sf.dim() != (h, w, 1) {
        return Err(Error::config(format!(
            "scale map {:?} does not match features {:?}",
            sf.dim(),
            f_g.dim()
        )));
    }
    let mut out = f_g.clone();
    for i in 0..h {
        for j in 0..w {
            let s = sf[(i, j, 0)];
            for k in 0..c {
                out[(i, j, k)] *= s;
            }
        }
    }
    Ok(out)
}

pub fn apply_scale_backward(
    f_g: &Array3<f32>,
    sf: &ScaleFactorMap,
    g_out: &Array3<f32>,
) -> (Array3<f32>, Array3<f32>) {
    let (h, w, c) = f_g.dim();
    let mut g_f = g_out.clone();
    let mut g_sf = Array3::zeros((h, w, 1));
    for i in 0..h {
        for j in 0..w {
            let s = sf[(i, j, 0)];
            let mut acc = 0.0f32;
            for k in 0..c {
                acc += g_out[(i, j, k)] * f_g[(i, j, k)];
                g_f[(i, j, k)] *= s;
            }
            g_sf[(i, j, 0)] = acc;
        }
    }
    (g_f, g_sf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn aggregate_means_over_channels() {
        let mut mask = Array3::zeros((2, 2, 4));
        for (k, v) in [0.2f32, 0.4, 0.6, 0.8].iter().enumerate() {
            mask.slice_mut(ndarray::s![.., .., k]).fill(*v);
        }
        let si = aggregate_mask(&mask);
        assert_eq!(si.dim(), (2, 2, 1));
        assert!(si.iter().all(|v| (*v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn aggregate_single_channel_is_identity() {
        let mask = Array3::from_shape_fn((3, 2, 1), |(i, j, _)| (i + 2 * j) as f32 * 0.1);
        let si = aggregate_mask(&mask);
        assert_eq!(si, mask);
    }

    #[test]
    fn aggregate_matches_per_pixel_mean_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mask = Array3::from_shape_simple_fn((3, 3, 192), || rng.gen_range(0.0..1.0f32));
        let si = aggregate_mask(&mask);
        for i in 0..3 {
            for j in 0..3 {
                let mut sum = 0.0f64;
                for k in 0..192 {
                    sum += mask[(i, j, k)] as f64;
                }
                let mean = (sum / 192.0) as f32;
                assert!((si[(i, j, 0)] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rd_map_tiles_the_value() {
        let m = build_rd_map(0.0016, 4, 4).unwrap();
        assert_eq!(m.dim(), (4, 4, 1));
        assert!(m.iter().all(|v| *v == 0.0016));
        let one = build_rd_map(0.045, 1, 1).unwrap();
        assert_eq!(one[(0, 0, 0)], 0.045);
        let six = build_rd_map(1.0, 2, 3).unwrap();
        assert_eq!(six.iter().filter(|v| **v == 1.0).count(), 6);
        assert!(build_rd_map(0.0, 2, 2).is_err());
        assert!(build_rd_map(-1.0, 2, 2).is_err());
    }

    #[test]
    fn zero_network_scales_by_one() {
        let p = SsnParams::zeros();
        let si = Array3::from_elem((3, 3, 1), 0.7f32);
        let rd = build_rd_map(0.01, 3, 3).unwrap();
        let sf = ssn_forward(&si, &rd, &p).unwrap();
        assert!(sf.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn output_bias_ln_two_scales_by_two() {
        let mut p = SsnParams::zeros();
        p.output.bias[0] = std::f32::consts::LN_2;
        let si = Array3::from_elem((2, 2, 1), 0.3f32);
        let rd = build_rd_map(0.02, 2, 2).unwrap();
        let sf = ssn_forward(&si, &rd, &p).unwrap();
        assert!(sf.iter().all(|v| (*v - 2.0).abs() < 1e-6));
    }

    #[test]
    fn single_effective_hidden_unit_matches_oracle() {
        let mut p = SsnParams::zeros();
        p.hidden.weight[(0, 0)] = 1.0;
        p.hidden.weight[(1, 0)] = 1.0;
        p.output.weight[(0, 0)] = 1.0;
        let si = Array3::from_elem((1, 1, 1), 0.5f32);
        let rd = build_rd_map(0.01, 1, 1).unwrap();
        let sf = ssn_forward(&si, &rd, &p).unwrap();
        assert!((sf[(0, 0, 0)] - 1.665292).abs() < 1e-5);
    }

    #[test]
    fn scale_factors_always_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = SsnParams {
            hidden: Linear::init(2, SSN_HIDDEN, &mut rng),
            output: Linear::init(SSN_HIDDEN, 1, &mut rng),
        };
        for _ in 0..40 {
            let si = Array3::from_shape_simple_fn((5, 5, 1), || rng.gen_range(-100.0..100.0f32));
            let rd = build_rd_map(rng.gen_range(0.001..100.0), 5, 5).unwrap();
            let sf = ssn_forward(&si, &rd, &p).unwrap();
            assert!(sf.iter().all(|v| *v > 0.0 && v.is_finite()));
        }
    }

    #[test]
    fn pixel_permutation_permutes_scale_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let p = SsnParams {
            hidden: Linear::init(2, SSN_HIDDEN, &mut rng),
            output: Linear::init(SSN_HIDDEN, 1, &mut rng),
        };
        let si = Array3::from_shape_simple_fn((2, 3, 1), || rng.gen_range(0.0..1.0f32));
        let rd = build_rd_map(0.01, 2, 3).unwrap();
        let sf = ssn_forward(&si, &rd, &p).unwrap();
        // reverse pixels
        let mut si_r = Array3::zeros((2, 3, 1));
        for i in 0..2 {
            for j in 0..3 {
                si_r[(i, j, 0)] = si[(1 - i, 2 - j, 0)];
            }
        }
        let sf_r = ssn_forward(&si_r, &rd, &p).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(sf_r[(i, j, 0)], sf[(1 - i, 2 - j, 0)]);
            }
        }
    }

    #[test]
    fn apply_scale_examples() {
        let f = Array3::from_elem((2, 2, 3), 3.0f32);
        let ones = Array3::from_elem((2, 2, 1), 1.0f32);
        assert_eq!(apply_scale(&f, &ones).unwrap(), f);
        let twos = Array3::from_elem((2, 2, 1), 2.0f32);
        let out = apply_scale(&f, &twos).unwrap();
        assert!(out.iter().all(|v| *v == 6.0));
    }

    #[test]
    fn apply_scale_matches_loop_oracle_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let f = Array3::from_shape_simple_fn((4, 4, 8), || rng.gen_range(-2.0..2.0f32));
        let sf = Array3::from_shape_simple_fn((4, 4, 1), || rng.gen_range(0.1..4.0f32));
        let out = apply_scale(&f, &sf).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..8 {
                    assert_eq!(out[(i, j, k)], f[(i, j, k)] * sf[(i, j, 0)]);
                }
            }
        }
        let inv = sf.mapv(|v| 1.0 / v);
        let back = apply_scale(&out, &inv).unwrap();
        for (a, b) in back.iter().zip(f.iter()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-3));
        }
    }

    #[test]
    fn ssn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let p = SsnParams {
            hidden: Linear::init(2, SSN_HIDDEN, &mut rng),
            output: Linear::init(SSN_HIDDEN, 1, &mut rng),
        };
        let si = Array3::from_shape_simple_fn((4, 4, 1), || rng.gen_range(0.0..1.0f32));
        let rd = build_rd_map(0.02, 4, 4).unwrap();
        let wsum = Array3::from_shape_simple_fn((4, 4, 1), || rng.gen_range(-1.0..1.0f32));
        let loss = |p: &SsnParams, si: &Array3<f32>| -> f64 {
            let sf = ssn_forward(si, &rd, p).unwrap();
            sf.iter().zip(wsum.iter()).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let (_, cache) = ssn_forward_cached(&si, &rd, &p).unwrap();
        let mut grads = SsnParams::zeros();
        let g_si = ssn_backward(&p, &cache, &wsum, &mut grads);
        let h = 1e-3f32;
        for idx in [(0usize, 0usize, 0usize), (2, 3, 0)] {
            let mut sp = si.clone();
            sp[idx] += h;
            let up = loss(&p, &sp);
            sp[idx] = si[idx] - h;
            let dn = loss(&p, &sp);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = g_si[idx] as f64;
            assert!((an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()), "{an} vs {fd}");
        }
        for idx in [(0usize, 0usize), (1, 7)] {
            let mut pp = p.clone();
            pp.hidden.weight[idx] += h;
            let up = loss(&pp, &si);
            pp.hidden.weight[idx] = p.hidden.weight[idx] - h;
            let dn = loss(&pp, &si);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = grads.hidden.weight[idx] as f64;
            assert!((an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()), "{an} vs {fd}");
        }
    }
}
