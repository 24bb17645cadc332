//! Shallow feature fusion: a small two-level U-shaped network that merges
//! restored shallow channels into the decoded features. The final projection
//! starts at zero, so a freshly built block is an exact identity on the
//! decoded features.

use crate::blocks::act::{leaky_relu, leaky_relu_grad};
use crate::blocks::conv::{Conv2d, ConvTranspose2d};
use crate::blocks::rcab::{
    rcab_backward, rcab_forward_cached, RcabCache, RcabParams,
};
use crate::blocks::FeatureMap;
use crate::error::{Error, Result};
use crate::ndutil::{concat_channels, split_channels};
use ndarray::Array3;
use rand::Rng;

/// Largest attention reduction not exceeding 16 that divides `c`.
fn fitting_reduction(c: usize) -> usize {
    (1..=16.min(c)).rev().find(|r| c % r == 0).unwrap_or(1)
}

#[derive(Debug, Clone)]
pub struct SffmParams {
    pub in_proj: Conv2d,
    pub enc_rcab1: RcabParams,
    pub enc_rcab2: RcabParams,
    pub down: Conv2d,
    pub mid_rcab1: RcabParams,
    pub mid_rcab2: RcabParams,
    pub up: ConvTranspose2d,
    pub merge: Conv2d,
    pub out_proj: Conv2d,
}

impl SffmParams {
    /// `c_dec` decoded channels, `c_sh` shallow channels. The internal width
    /// scales with the decoded width.
    pub fn init<R: Rng>(c_dec: usize, c_sh: usize, rng: &mut R) -> Result<Self> {
        let m = (c_dec / 3).max(8);
        let r0 = fitting_reduction(m);
        let r1 = fitting_reduction(2 * m);
        Ok(SffmParams {
            in_proj: Conv2d::init(3, c_dec + c_sh, m, 1, 1, rng),
            enc_rcab1: RcabParams::init(m, r0, rng)?,
            enc_rcab2: RcabParams::init(m, r0, rng)?,
            down: Conv2d::init(3, m, 2 * m, 2, 1, rng),
            mid_rcab1: RcabParams::init(2 * m, r1, rng)?,
            mid_rcab2: RcabParams::init(2 * m, r1, rng)?,
            up: ConvTranspose2d::init(3, 2 * m, m, 2, 1, 1, rng),
            merge: Conv2d::init(3, 2 * m, m, 1, 1, rng),
            out_proj: Conv2d::zeros(3, m, c_dec, 1, 1),
        })
    }

    pub fn zeros(c_dec: usize, c_sh: usize) -> Result<Self> {
        let m = (c_dec / 3).max(8);
        let r0 = fitting_reduction(m);
        let r1 = fitting_reduction(2 * m);
        Ok(SffmParams {
            in_proj: Conv2d::zeros(3, c_dec + c_sh, m, 1, 1),
            enc_rcab1: RcabParams::zeros(m, r0)?,
            enc_rcab2: RcabParams::zeros(m, r0)?,
            down: Conv2d::zeros(3, m, 2 * m, 2, 1),
            mid_rcab1: RcabParams::zeros(2 * m, r1)?,
            mid_rcab2: RcabParams::zeros(2 * m, r1)?,
            up: ConvTranspose2d::zeros(3, 2 * m, m, 2, 1, 1),
            merge: Conv2d::zeros(3, 2 * m, m, 1, 1),
            out_proj: Conv2d::zeros(3, m, c_dec, 1, 1),
        })
    }
}

pub struct SffmCache {
    pub decoded: Array3<f32>,
    pub cat: Array3<f32>,
    pub e_pre: Array3<f32>,
    pub e0: Array3<f32>,
    pub r1: RcabCache,
    pub r2: RcabCache,
    pub e: Array3<f32>,
    pub d_pre: Array3<f32>,
    pub d0: Array3<f32>,
    pub m1: RcabCache,
    pub m2: RcabCache,
    pub dmid: Array3<f32>,
    pub u_pre: Array3<f32>,
    pub u: Array3<f32>,
    pub mcat: Array3<f32>,
    pub mg_pre: Array3<f32>,
    pub mg: Array3<f32>,
    pub c_sh: usize,
}

pub fn sffm_forward(
    decoded: &FeatureMap,
    shallow: &FeatureMap,
    params: &SffmParams,
) -> Result<FeatureMap> {
    Ok(sffm_forward_cached(decoded, shallow, params)?.0)
}

pub fn sffm_forward_cached(
    decoded: &FeatureMap,
    shallow: &FeatureMap,
    params: &SffmParams,
) -> Result<(FeatureMap, SffmCache)> {
    let (h, w, _) = decoded.dim();
    if shallow.dim().0 != h || shallow.dim().1 != w {
        return Err(Error::config(format!(
            "shallow features {:?} must match decoded spatial dims {:?}",
            shallow.dim(),
            decoded.dim()
        )));
    }
    let cat = concat_channels(decoded, shallow)?;
    let e_pre = params.in_proj.forward(&cat)?;
    let e0 = leaky_relu(&e_pre);
    let (e1, r1) = rcab_forward_cached(&e0, &params.enc_rcab1)?;
    let (e, r2) = rcab_forward_cached(&e1, &params.enc_rcab2)?;
    let d_pre = params.down.forward(&e)?;
    let d0 = leaky_relu(&d_pre);
    let (d1, m1) = rcab_forward_cached(&d0, &params.mid_rcab1)?;
    let (dmid, m2) = rcab_forward_cached(&d1, &params.mid_rcab2)?;
    let u_pre = params.up.forward(&dmid)?;
    if u_pre.dim().0 != h || u_pre.dim().1 != w {
        return Err(Error::internal(format!(
            "fusion upsample produced {:?}, expected {h}x{w}; stride bookkeeping is wrong",
            u_pre.dim()
        )));
    }
    let u = leaky_relu(&u_pre);
    let mcat = concat_channels(&u, &e)?;
    let mg_pre = params.merge.forward(&mcat)?;
    let mg = leaky_relu(&mg_pre);
    let out = decoded + &params.out_proj.forward(&mg)?;
    let cache = SffmCache {
        decoded: decoded.clone(),
        cat,
        e_pre,
        e0,
        r1,
        r2,
        e,
        d_pre,
        d0,
        m1,
        m2,
        dmid,
        u_pre,
        u,
        mcat,
        mg_pre,
        mg,
        c_sh: shallow.dim().2,
    };
    Ok((out, cache))
}

/// Returns gradients w.r.t. (decoded, shallow).
pub fn sffm_backward(
    params: &SffmParams,
    cache: &SffmCache,
    g_out: &Array3<f32>,
    grads: &mut SffmParams,
) -> (Array3<f32>, Array3<f32>) {
    let gmg = params.out_proj.backward(&cache.mg, g_out, &mut grads.out_proj);
    let gmg_pre = leaky_relu_grad(&cache.mg_pre, &gmg);
    let gmcat = params.merge.backward(&cache.mcat, &gmg_pre, &mut grads.merge);
    let m = cache.u.dim().2;
    let (gu, ge_skip) = split_channels(&gmcat, m);
    let gu_pre = leaky_relu_grad(&cache.u_pre, &gu);
    let gdmid = params.up.backward(&cache.dmid, &gu_pre, &mut grads.up);
    let gd1 = rcab_backward(&params.mid_rcab2, &cache.m2, &gdmid, &mut grads.mid_rcab2);
    let gd0 = rcab_backward(&params.mid_rcab1, &cache.m1, &gd1, &mut grads.mid_rcab1);
    let gd_pre = leaky_relu_grad(&cache.d_pre, &gd0);
    let ge_down = params.down.backward(&cache.e, &gd_pre, &mut grads.down);
    let ge = ge_down + ge_skip;
    let ge1 = rcab_backward(&params.enc_rcab2, &cache.r2, &ge, &mut grads.enc_rcab2);
    let ge0 = rcab_backward(&params.enc_rcab1, &cache.r1, &ge1, &mut grads.enc_rcab1);
    let ge_pre = leaky_relu_grad(&cache.e_pre, &ge0);
    let gcat = params.in_proj.backward(&cache.cat, &ge_pre, &mut grads.in_proj);
    let c_dec = cache.decoded.dim().2;
    let (g_dec_cat, g_sh) = split_channels(&gcat, c_dec);
    (g_dec_cat + g_out, g_sh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_at_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let p = SffmParams::init(6, 2, &mut rng).unwrap();
        let dec = Array3::from_shape_simple_fn((8, 8, 6), || rng.gen_range(-1.0..1.0f32));
        let sh = Array3::from_shape_simple_fn((8, 8, 2), || rng.gen_range(-1.0..1.0f32));
        let out = sffm_forward(&dec, &sh, &p).unwrap();
        assert_eq!(out, dec);
    }

    #[test]
    fn all_zero_weights_are_identity_too() {
        let p = SffmParams::zeros(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dec = Array3::from_shape_simple_fn((6, 6, 4), || rng.gen_range(-1.0..1.0f32));
        let sh = Array3::zeros((6, 6, 2));
        let out = sffm_forward(&dec, &sh, &p).unwrap();
        assert_eq!(out, dec);
    }

    #[test]
    fn random_weights_match_layer_by_layer_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut p = SffmParams::init(6, 2, &mut rng).unwrap();
        // give the final projection real weights so the replay exercises it
        p.out_proj = Conv2d::init(3, 8, 6, 1, 1, &mut rng);
        let dec = Array3::from_shape_simple_fn((8, 8, 6), || rng.gen_range(-1.0..1.0f32));
        let sh = Array3::from_shape_simple_fn((8, 8, 2), || rng.gen_range(-1.0..1.0f32));
        let out = sffm_forward(&dec, &sh, &p).unwrap();
        // replay with the individual pieces
        let cat = concat_channels(&dec, &sh).unwrap();
        let e0 = leaky_relu(&p.in_proj.forward(&cat).unwrap());
        let e1 = crate::blocks::rcab::rcab_forward(&e0, &p.enc_rcab1).unwrap();
        let e = crate::blocks::rcab::rcab_forward(&e1, &p.enc_rcab2).unwrap();
        let d0 = leaky_relu(&p.down.forward(&e).unwrap());
        let d1 = crate::blocks::rcab::rcab_forward(&d0, &p.mid_rcab1).unwrap();
        let dm = crate::blocks::rcab::rcab_forward(&d1, &p.mid_rcab2).unwrap();
        let u = leaky_relu(&p.up.forward(&dm).unwrap());
        let mg = leaky_relu(&p.merge.forward(&concat_channels(&u, &e).unwrap()).unwrap());
        let expect = &dec + &p.out_proj.forward(&mg).unwrap();
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let mut p = SffmParams::init(4, 2, &mut rng).unwrap();
        p.out_proj = Conv2d::init(3, 8, 4, 1, 1, &mut rng);
        let dec = Array3::from_shape_simple_fn((4, 4, 4), || rng.gen_range(-1.0..1.0f32));
        let sh = Array3::from_shape_simple_fn((4, 4, 2), || rng.gen_range(-1.0..1.0f32));
        let wsum = Array3::from_shape_simple_fn((4, 4, 4), || rng.gen_range(-1.0..1.0f32));
        let loss = |p: &SffmParams, dec: &Array3<f32>, sh: &Array3<f32>| -> f64 {
            let y = sffm_forward(dec, sh, p).unwrap();
            y.iter().zip(wsum.iter()).map(|(a, b)| (*a * *b) as f64).sum()
        };
        let (_, cache) = sffm_forward_cached(&dec, &sh, &p).unwrap();
        let mut grads = SffmParams::zeros(4, 2).unwrap();
        let (g_dec, g_sh) = sffm_backward(&p, &cache, &wsum, &mut grads);
        let h = 1e-3f32;
        for idx in [(0usize, 0usize, 0usize), (3, 2, 3)] {
            let mut dp = dec.clone();
            dp[idx] += h;
            let up = loss(&p, &dp, &sh);
            dp[idx] = dec[idx] - h;
            let dn = loss(&p, &dp, &sh);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = g_dec[idx] as f64;
            assert!((an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()), "{an} vs {fd}");
        }
        for idx in [(1usize, 1usize, 0usize), (2, 3, 1)] {
            let mut sp = sh.clone();
            sp[idx] += h;
            let up = loss(&p, &dec, &sp);
            sp[idx] = sh[idx] - h;
            let dn = loss(&p, &dec, &sp);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = g_sh[idx] as f64;
            assert!((an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()), "{an} vs {fd}");
        }
        for idx in [(0usize, 0usize, 0usize, 0usize), (2, 2, 5, 1)] {
            let mut pp = p.clone();
            pp.merge.weight[idx] += h;
            let up = loss(&pp, &dec, &sh);
            pp.merge.weight[idx] = p.merge.weight[idx] - h;
            let dn = loss(&pp, &dec, &sh);
            let fd = (up - dn) / (2.0 * h as f64);
            let an = grads.merge.weight[idx] as f64;
            assert!((an - fd).abs() < 1e-3 + 2e-3 * fd.abs().max(an.abs()), "merge {an} vs {fd}");
        }
    }
}
