//! Forward and backward passes of the analysis transform, the hyperprior and
//! the synthesis transform.
//!
//! Every forward function can optionally retain the intermediates needed by
//! its backward counterpart; the arithmetic is identical either way, so
//! inference and training share one code path.

use crate::blocks::act::{leaky_relu, leaky_relu_grad, sigmoid};
use crate::blocks::sgu::{sgu_backward, sgu_forward_cached, SguCache};
use crate::blocks::ssn::{
    aggregate_mask, aggregate_mask_backward, apply_scale, apply_scale_backward, build_rd_map,
    ssn_backward, ssn_forward_cached, SsnCache,
};
use crate::codec::model::{DecStage, EncStage, ModelState};
use crate::codec::rate::SIGMA_FLOOR;
use crate::error::{Error, Result};
use crate::ndutil::{concat_channels, crop, scatter_channels_add, select_channels, split_channels};
use ndarray::Array3;

/// Constant spatial importance used when gating is disabled.
const FLAT_IMPORTANCE: f32 = 0.5;

pub struct EncStageCache {
    pub x_in: Array3<f32>,
    pub conv_pre: Array3<f32>,
    pub f: Array3<f32>,
    pub sgu: Option<SguCache>,
    pub ssn: SsnCache,
    pub f_g: Array3<f32>,
    pub sf: Array3<f32>,
}

pub fn enc_stage_forward(
    st: &EncStage,
    x: &Array3<f32>,
    lambda: f32,
    want: bool,
) -> Result<(Array3<f32>, Option<EncStageCache>)> {
    let conv_pre = st.conv.forward(x)?;
    let f = leaky_relu(&conv_pre);
    let (h, w, _) = f.dim();
    let (f_g, si, sgu_cache) = match &st.sgu {
        Some(p) => {
            let (f_g, mask, c) = sgu_forward_cached(&f, p)?;
            (f_g, aggregate_mask(&mask), Some(c))
        }
        None => (f.clone(), Array3::from_elem((h, w, 1), FLAT_IMPORTANCE), None),
    };
    let rd = build_rd_map(lambda, h, w)?;
    let (sf, ssn_cache) = ssn_forward_cached(&si, &rd, &st.ssn)?;
    let out = apply_scale(&f_g, &sf)?;
    let cache = want.then(|| EncStageCache {
        x_in: x.clone(),
        conv_pre,
        f,
        sgu: sgu_cache,
        ssn: ssn_cache,
        f_g,
        sf,
    });
    Ok((out, cache))
}

pub fn enc_stage_backward(
    st: &EncStage,
    cache: &EncStageCache,
    g_out: &Array3<f32>,
    grads: &mut EncStage,
) -> Array3<f32> {
    let (g_fg, g_sf) = apply_scale_backward(&cache.f_g, &cache.sf, g_out);
    let g_si = ssn_backward(&st.ssn, &cache.ssn, &g_sf, &mut grads.ssn);
    let g_f = match (&st.sgu, &cache.sgu) {
        (Some(p), Some(c)) => {
            let g_mask = aggregate_mask_backward(&g_si, p.channels());
            sgu_backward(p, c, &g_fg, Some(&g_mask), grads.sgu.as_mut().unwrap())
        }
        _ => g_fg,
    };
    let g_conv_pre = leaky_relu_grad(&cache.conv_pre, &g_f);
    st.conv.backward(&cache.x_in, &g_conv_pre, &mut grads.conv)
}

pub struct DecStageCache {
    pub h_in: Array3<f32>,
    pub sgu: Option<SguCache>,
    pub ssn: SsnCache,
    pub gated: Array3<f32>,
    pub sf: Array3<f32>,
    pub scaled: Array3<f32>,
    pub tconv_pre: Array3<f32>,
}

pub fn dec_stage_forward(
    st: &DecStage,
    h_in: &Array3<f32>,
    lambda: f32,
    want: bool,
) -> Result<(Array3<f32>, Option<DecStageCache>)> {
    let (hh, ww, _) = h_in.dim();
    let (gated, si, sgu_cache) = match &st.sgu {
        Some(p) => {
            let (g, mask, c) = sgu_forward_cached(h_in, p)?;
            (g, aggregate_mask(&mask), Some(c))
        }
        None => (
            h_in.clone(),
            Array3::from_elem((hh, ww, 1), FLAT_IMPORTANCE),
            None,
        ),
    };
    let rd = build_rd_map(lambda, hh, ww)?;
    let (sf, ssn_cache) = ssn_forward_cached(&si, &rd, &st.ssn)?;
    let scaled = apply_scale(&gated, &sf)?;
    let tconv_pre = st.tconv.forward(&scaled)?;
    let out = leaky_relu(&tconv_pre);
    let cache = want.then(|| DecStageCache {
        h_in: h_in.clone(),
        sgu: sgu_cache,
        ssn: ssn_cache,
        gated,
        sf,
        scaled,
        tconv_pre,
    });
    Ok((out, cache))
}

pub fn dec_stage_backward(
    st: &DecStage,
    cache: &DecStageCache,
    g_out: &Array3<f32>,
    grads: &mut DecStage,
) -> Array3<f32> {
    let g_tpre = leaky_relu_grad(&cache.tconv_pre, g_out);
    let g_scaled = st.tconv.backward(&cache.scaled, &g_tpre, &mut grads.tconv);
    let (g_gated, g_sf) = apply_scale_backward(&cache.gated, &cache.sf, &g_scaled);
    let g_si = ssn_backward(&st.ssn, &cache.ssn, &g_sf, &mut grads.ssn);
    match (&st.sgu, &cache.sgu) {
        (Some(p), Some(c)) => {
            let g_mask = aggregate_mask_backward(&g_si, p.channels());
            sgu_backward(p, c, &g_gated, Some(&g_mask), grads.sgu.as_mut().unwrap())
        }
        _ => g_gated,
    }
}

pub struct AnalysisCache {
    pub stages: Vec<EncStageCache>,
    /// stage-1 features (shallow source), kept even without a full cache
    pub shallow_pres: Vec<Array3<f32>>,
    pub shallow_sel: Option<Array3<f32>>,
}

/// Runs the analysis transform over a padded image. Returns the latent, the
/// downsampled selected shallow channels, the shallow source features and an
/// optional cache for backprop.
pub fn analyze_forward(
    model: &ModelState,
    x: &Array3<f32>,
    lambda: f32,
    want: bool,
) -> Result<(Array3<f32>, Array3<f32>, Array3<f32>, Option<AnalysisCache>)> {
    let factor = model.config.spatial_factor();
    let (h, w, c) = x.dim();
    if c != 3 {
        return Err(Error::config(format!("expected a 3-channel image, got {c}")));
    }
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::internal(format!(
            "analysis input {h}x{w} must already be padded to multiples of {factor}"
        )));
    }
    let mut stages = Vec::new();
    let mut cur = x.clone();
    let mut shallow_src = Array3::zeros((0, 0, 0));
    for (i, st) in model.enc.iter().enumerate() {
        let (out, cache) = enc_stage_forward(st, &cur, lambda, want)?;
        if i == 0 {
            shallow_src = match &cache {
                Some(c) => c.f.clone(),
                None => leaky_relu(&st.conv.forward(&cur)?),
            };
        }
        if let Some(c) = cache {
            stages.push(c);
        }
        cur = out;
    }
    let y = cur;
    let ke = model.config.k_eff();
    let (shallow_k, shallow_pres, shallow_sel) = if ke > 0 {
        let sel = select_channels(&shallow_src, &model.config.topk_indices)?;
        let mut pres = Vec::new();
        let mut sd = sel.clone();
        for conv in &model.shallow_down {
            let pre = conv.forward(&sd)?;
            sd = leaky_relu(&pre);
            pres.push(pre);
        }
        (sd, pres, Some(sel))
    } else {
        let (yh, yw) = model.config.latent_dims(h, w);
        (Array3::zeros((yh, yw, 0)), Vec::new(), None)
    };
    let cache = want.then_some(AnalysisCache {
        stages,
        shallow_pres,
        shallow_sel,
    });
    Ok((y, shallow_k, shallow_src, cache))
}

/// Backward through the analysis transform. `g_y` is the latent gradient,
/// `g_shallow_k` the gradient of the transmitted shallow channels.
pub fn analyze_backward(
    model: &ModelState,
    cache: &AnalysisCache,
    g_y: &Array3<f32>,
    g_shallow_k: &Array3<f32>,
    grads: &mut ModelState,
) {
    // shallow downsampling chain back to the stage-1 features
    let mut g_shallow_src: Option<Array3<f32>> = None;
    if let Some(sel) = &cache.shallow_sel {
        let mut g = g_shallow_k.clone();
        for i in (0..model.shallow_down.len()).rev() {
            let g_pre = leaky_relu_grad(&cache.shallow_pres[i], &g);
            let x_in = if i == 0 {
                sel.clone()
            } else {
                leaky_relu(&cache.shallow_pres[i - 1])
            };
            g = model.shallow_down[i].backward(&x_in, &g_pre, &mut grads.shallow_down[i]);
        }
        let n0 = cache.stages[0].f.dim().2;
        let (sh, sw, _) = g.dim();
        let mut spread = Array3::zeros((sh, sw, n0));
        scatter_channels_add(&mut spread, &g, &model.config.topk_indices);
        g_shallow_src = Some(spread);
    }
    let mut g = g_y.clone();
    for i in (1..model.enc.len()).rev() {
        g = enc_stage_backward(&model.enc[i], &cache.stages[i], &g, &mut grads.enc[i]);
    }
    // stage 1 is special: its activated features feed both the stage body and
    // the shallow path, so the two gradients meet before the first conv.
    let st = &model.enc[0];
    let c0 = &cache.stages[0];
    let (g_fg, g_sf) = apply_scale_backward(&c0.f_g, &c0.sf, &g);
    let g_si = ssn_backward(&st.ssn, &c0.ssn, &g_sf, &mut grads.enc[0].ssn);
    let mut g_f = match (&st.sgu, &c0.sgu) {
        (Some(p), Some(c)) => {
            let g_mask = aggregate_mask_backward(&g_si, p.channels());
            sgu_backward(p, c, &g_fg, Some(&g_mask), grads.enc[0].sgu.as_mut().unwrap())
        }
        _ => g_fg,
    };
    if let Some(extra) = g_shallow_src {
        g_f += &extra;
    }
    let g_pre = leaky_relu_grad(&c0.conv_pre, &g_f);
    let _ = st.conv.backward(&c0.x_in, &g_pre, &mut grads.enc[0].conv);
}

pub struct HyperEncCache {
    pub c_in: Array3<f32>,
    pub pres: Vec<Array3<f32>>,
}

/// Three convolutions (stride 1, 2, 2) from the concatenated latent down to
/// the hyper-latent.
pub fn hyper_encode_forward(
    model: &ModelState,
    c: &Array3<f32>,
    want: bool,
) -> Result<(Array3<f32>, Option<HyperEncCache>)> {
    let mut pres = Vec::new();
    let mut cur = c.clone();
    for (i, conv) in model.hyper_enc.iter().enumerate() {
        let pre = conv.forward(&cur)?;
        cur = if i + 1 < model.hyper_enc.len() {
            leaky_relu(&pre)
        } else {
            pre.clone()
        };
        pres.push(pre);
    }
    let cache = want.then_some(HyperEncCache { c_in: c.clone(), pres });
    Ok((cur, cache))
}

pub fn hyper_encode_backward(
    model: &ModelState,
    cache: &HyperEncCache,
    g_z: &Array3<f32>,
    grads: &mut ModelState,
) -> Array3<f32> {
    let last = model.hyper_enc.len() - 1;
    let mut g = g_z.clone();
    for i in (0..=last).rev() {
        if i != last {
            g = leaky_relu_grad(&cache.pres[i], &g);
        }
        let x_in = if i == 0 {
            cache.c_in.clone()
        } else {
            leaky_relu(&cache.pres[i - 1])
        };
        g = model.hyper_enc[i].backward(&x_in, &g, &mut grads.hyper_enc[i]);
    }
    g
}

pub struct HyperDecCache {
    pub z_in: Array3<f32>,
    pub u1_pre: Array3<f32>,
    pub u1_crop: Array3<f32>,
    pub u2_pre: Array3<f32>,
    pub u2_crop: Array3<f32>,
    pub a2: Array3<f32>,
    pub sigma_raw: Array3<f32>,
}

/// Decodes the hyper-latent into elementwise Gaussian parameters shaped like
/// the concatenated latent. Outputs are cropped to the latent dims, since the
/// transposed convolutions can overshoot odd sizes.
pub fn hyper_decode_forward(
    model: &ModelState,
    z: &Array3<f32>,
    y_dims: (usize, usize),
    want: bool,
) -> Result<(Array3<f32>, Array3<f32>, Option<HyperDecCache>)> {
    let (yh, yw) = y_dims;
    let (mid_h, mid_w) = (yh.div_ceil(2), yw.div_ceil(2));
    let u1_pre = model.hyper_dec_up1.forward(z)?;
    if u1_pre.dim().0 < mid_h || u1_pre.dim().1 < mid_w {
        return Err(Error::internal("hyper decoder undershot its target size"));
    }
    let u1_crop = crop(&u1_pre, mid_h, mid_w);
    let a1 = leaky_relu(&u1_crop);
    let u2_pre = model.hyper_dec_up2.forward(&a1)?;
    if u2_pre.dim().0 < yh || u2_pre.dim().1 < yw {
        return Err(Error::internal("hyper decoder undershot its target size"));
    }
    let u2_crop = crop(&u2_pre, yh, yw);
    let a2 = leaky_relu(&u2_crop);
    let out = model.hyper_dec_out.forward(&a2)?;
    let half = out.dim().2 / 2;
    let (mu, sigma_raw) = split_channels(&out, half);
    let sigma = sigma_raw.mapv(|v| softplus_f32(v) + SIGMA_FLOOR as f32);
    let cache = want.then_some(HyperDecCache {
        z_in: z.clone(),
        u1_pre,
        u1_crop,
        u2_pre,
        u2_crop,
        a2,
        sigma_raw,
    });
    Ok((mu, sigma, cache))
}

pub fn hyper_decode_backward(
    model: &ModelState,
    cache: &HyperDecCache,
    g_mu: &Array3<f32>,
    g_sigma: &Array3<f32>,
    grads: &mut ModelState,
) -> Array3<f32> {
    // sigma = softplus(raw) + floor
    let g_sigma_raw = {
        let mut g = g_sigma.clone();
        g.zip_mut_with(&cache.sigma_raw, |gv, rv| *gv *= sigmoid(*rv));
        g
    };
    let g_out = concat_channels(g_mu, &g_sigma_raw).expect("matching dims");
    let g_a2 = model
        .hyper_dec_out
        .backward(&cache.a2, &g_out, &mut grads.hyper_dec_out);
    let g_u2c = leaky_relu_grad(&cache.u2_crop, &g_a2);
    let g_u2 = pad_grad(&g_u2c, cache.u2_pre.dim());
    let a1 = leaky_relu(&cache.u1_crop);
    let g_a1 = model
        .hyper_dec_up2
        .backward(&a1, &g_u2, &mut grads.hyper_dec_up2);
    let g_u1c = leaky_relu_grad(&cache.u1_crop, &g_a1);
    let g_u1 = pad_grad(&g_u1c, cache.u1_pre.dim());
    model
        .hyper_dec_up1
        .backward(&cache.z_in, &g_u1, &mut grads.hyper_dec_up1)
}

fn pad_grad(g: &Array3<f32>, dims: (usize, usize, usize)) -> Array3<f32> {
    if g.dim() == dims {
        return g.clone();
    }
    let mut out = Array3::zeros(dims);
    out.slice_mut(ndarray::s![..g.dim().0, ..g.dim().1, ..])
        .assign(g);
    out
}

fn softplus_f32(v: f32) -> f32 {
    if v > 30.0 {
        v
    } else {
        (1.0 + v.exp()).ln()
    }
}

pub struct SynthCache {
    pub shallow_pres: Vec<Array3<f32>>,
    pub s_in: Array3<f32>,
    pub stages: Vec<DecStageCache>,
    pub sffm: Option<crate::blocks::sffm::SffmCache>,
    pub final_in: Array3<f32>,
}

/// Synthesis transform: restores shallow features, runs the mirrored stages,
/// fuses shallow detail before the final upsampling stage, then projects to
/// RGB. The output is not clamped; inference clamps at the caller.
pub fn synth_forward(
    model: &ModelState,
    y_hat: &Array3<f32>,
    s_hat: &Array3<f32>,
    lambda: f32,
    want: bool,
) -> Result<(Array3<f32>, Option<SynthCache>)> {
    let ke = model.config.k_eff();
    let mut shallow_pres = Vec::new();
    let mut shallow = s_hat.clone();
    if ke > 0 {
        for t in &model.shallow_up {
            let pre = t.forward(&shallow)?;
            shallow = leaky_relu(&pre);
            shallow_pres.push(pre);
        }
    }
    let mut stages = Vec::new();
    let mut sffm_cache = None;
    let mut cur = y_hat.clone();
    let fuse_after = model.config.stages - 2;
    for (i, st) in model.dec.iter().enumerate() {
        let (out, cache) = dec_stage_forward(st, &cur, lambda, want)?;
        cur = out;
        if let Some(c) = cache {
            stages.push(c);
        }
        if i == fuse_after {
            if let Some(sffm) = &model.sffm {
                if shallow.dim().0 != cur.dim().0 || shallow.dim().1 != cur.dim().1 {
                    return Err(Error::internal(format!(
                        "restored shallow {:?} does not match decoder features {:?}",
                        shallow.dim(),
                        cur.dim()
                    )));
                }
                let (fused, c) =
                    crate::blocks::sffm::sffm_forward_cached(&cur, &shallow, sffm)?;
                cur = fused;
                sffm_cache = want.then_some(c);
            }
        }
    }
    let final_in = cur.clone();
    let x = model.final_proj.forward(&cur)?;
    let cache = want.then_some(SynthCache {
        shallow_pres,
        s_in: s_hat.clone(),
        stages,
        sffm: sffm_cache,
        final_in,
    });
    Ok((x, cache))
}

/// Backward through the synthesis transform.
/// Returns gradients w.r.t. (y_hat, s_hat).
pub fn synth_backward(
    model: &ModelState,
    cache: &SynthCache,
    g_x: &Array3<f32>,
    grads: &mut ModelState,
) -> (Array3<f32>, Array3<f32>) {
    let mut g = model
        .final_proj
        .backward(&cache.final_in, g_x, &mut grads.final_proj);
    let fuse_after = model.config.stages - 2;
    let mut g_shallow_restored: Option<Array3<f32>> = None;
    for i in (0..model.dec.len()).rev() {
        if i == fuse_after {
            if let (Some(sffm), Some(c)) = (&model.sffm, &cache.sffm) {
                let (g_dec, g_sh) = crate::blocks::sffm::sffm_backward(
                    sffm,
                    c,
                    &g,
                    grads.sffm.as_mut().unwrap(),
                );
                g = g_dec;
                g_shallow_restored = Some(g_sh);
            }
        }
        g = dec_stage_backward(&model.dec[i], &cache.stages[i], &g, &mut grads.dec[i]);
    }
    let g_y = g;
    let ke = model.config.k_eff();
    let g_s = if ke > 0 {
        if let Some(mut gs) = g_shallow_restored {
            for i in (0..model.shallow_up.len()).rev() {
                let pre = &cache.shallow_pres[i];
                let g_pre = leaky_relu_grad(pre, &gs);
                let x_in = if i == 0 {
                    cache.s_in.clone()
                } else {
                    leaky_relu(&cache.shallow_pres[i - 1])
                };
                gs = model.shallow_up[i].backward(&x_in, &g_pre, &mut grads.shallow_up[i]);
            }
            gs
        } else {
            Array3::zeros(cache.s_in.dim())
        }
    } else {
        Array3::zeros(cache.s_in.dim())
    };
    (g_y, g_s)
}

/// Per-channel prior parameters expanded to the hyper-latent's shape.
pub fn prior_params(model: &ModelState, dims: (usize, usize, usize)) -> (Array3<f32>, Array3<f32>) {
    let (h, w, c) = dims;
    let mut mu = Array3::zeros(dims);
    let mut sigma = Array3::zeros(dims);
    for k in 0..c {
        let m = model.prior_mu[k];
        let s = softplus_f32(model.prior_sigma_raw[k]) + SIGMA_FLOOR as f32;
        for i in 0..h {
            for j in 0..w {
                mu[(i, j, k)] = m;
                sigma[(i, j, k)] = s;
            }
        }
    }
    (mu, sigma)
}

/// Folds elementwise prior gradients back onto the per-channel parameters.
pub fn prior_backward(
    model: &ModelState,
    g_mu: &Array3<f32>,
    g_sigma: &Array3<f32>,
    grads: &mut ModelState,
) {
    let (h, w, c) = g_mu.dim();
    for k in 0..c {
        let mut gm = 0.0f64;
        let mut gs = 0.0f64;
        for i in 0..h {
            for j in 0..w {
                gm += g_mu[(i, j, k)] as f64;
                gs += g_sigma[(i, j, k)] as f64;
            }
        }
        grads.prior_mu[k] += gm as f32;
        grads.prior_sigma_raw[k] += (gs * sigmoid(model.prior_sigma_raw[k]) as f64) as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::CodecConfig;
    use crate::training::LambdaSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> ModelState {
        let cfg = CodecConfig::new(6, 4, 2, LambdaSpec::mse_default()).unwrap();
        ModelState::new(cfg, 5).unwrap()
    }

    #[test]
    fn analysis_shape_chain() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array3::from_shape_simple_fn((32, 32, 3), || rng.gen_range(0.0..1.0f32));
        let (y, s, src, _) = analyze_forward(&model, &x, 0.01, false).unwrap();
        assert_eq!(y.dim(), (2, 2, 6));
        assert_eq!(s.dim(), (2, 2, 2));
        assert_eq!(src.dim(), (16, 16, 6));
    }

    #[test]
    fn zero_weights_produce_zero_latents() {
        let model = tiny_model().zeros_like();
        let x = Array3::from_elem((32, 32, 3), 0.5f32);
        let (y, s, _, _) = analyze_forward(&model, &x, 0.01, false).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hyper_shapes_and_zero_weight_sigma() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Array3::from_shape_simple_fn((16, 16, 8), || rng.gen_range(-1.0..1.0f32));
        let (z, _) = hyper_encode_forward(&model, &c, false).unwrap();
        assert_eq!(z.dim(), (4, 4, 6));
        let zero = tiny_model().zeros_like();
        let (mu, sigma, _) = hyper_decode_forward(&zero, &z.mapv(|_| 0.0), (16, 16), false).unwrap();
        assert_eq!(mu.dim(), (16, 16, 8));
        assert!(mu.iter().all(|v| *v == 0.0));
        assert!(sigma.iter().all(|v| (*v - 0.694147).abs() < 1e-5));
    }

    #[test]
    fn hyper_handles_odd_latent_dims() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Array3::from_shape_simple_fn((3, 5, 8), || rng.gen_range(-1.0..1.0f32));
        let (z, _) = hyper_encode_forward(&model, &c, false).unwrap();
        assert_eq!(z.dim(), (1, 2, 6));
        let (mu, sigma, _) = hyper_decode_forward(&model, &z, (3, 5), false).unwrap();
        assert_eq!(mu.dim(), (3, 5, 8));
        assert!(sigma.iter().all(|v| *v >= SIGMA_FLOOR as f32));
    }

    #[test]
    fn synthesis_returns_full_resolution_rgb() {
        let model = tiny_model();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = Array3::from_shape_simple_fn((2, 2, 6), || rng.gen_range(-2.0..2.0f32));
        let s = Array3::from_shape_simple_fn((2, 2, 2), || rng.gen_range(-2.0..2.0f32));
        let (x, _) = synth_forward(&model, &y, &s, 0.01, false).unwrap();
        assert_eq!(x.dim(), (32, 32, 3));
    }
}
