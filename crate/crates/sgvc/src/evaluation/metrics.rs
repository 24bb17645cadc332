//! Quality metrics: PSNR and multi-scale SSIM with its decibel form.
//!
//! MS-SSIM follows the usual 5-scale construction: an 11-tap Gaussian window
//! (sigma 1.5), contrast-structure means at every scale, the luminance term
//! only at the coarsest, combined with the conventional exponents. Images too
//! small for five scales fall back to fewer scales with renormalized weights.
//! The backward pass exists because the codec can train against this metric.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// Scale means are clamped here before exponentiation.
const POS_FLOOR: f64 = 1e-6;
const QUALITY_CAP_DB: f64 = 100.0;

pub fn mse(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(Error::config(format!(
            "mse needs matching shapes, got {:?} and {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let mut acc = 0.0f64;
    for (a, b) in x.iter().zip(y.iter()) {
        let d = (*a - *b) as f64;
        acc += d * d;
    }
    Ok(acc / x.len() as f64)
}

/// Peak signal-to-noise ratio for [0, 1] images, capped at 100 dB.
pub fn psnr(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    let m = mse(x, y)?;
    if m < 1e-10 {
        return Ok(QUALITY_CAP_DB);
    }
    Ok((-10.0 * m.log10()).min(QUALITY_CAP_DB))
}

/// `-10 log10(1 - v)`, capped at 100 dB.
pub fn msssim_db(v: f64) -> f64 {
    if v >= 1.0 - 1e-10 {
        return QUALITY_CAP_DB;
    }
    (-10.0 * (1.0 - v).log10()).min(QUALITY_CAP_DB)
}

fn gaussian_window() -> [f32; WINDOW] {
    let mut k = [0f32; WINDOW];
    let c = (WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        let g = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        *v = g as f32;
        sum += g;
    }
    for v in &mut k {
        *v = (*v as f64 / sum) as f32;
    }
    k
}

/// Separable valid-mode Gaussian filtering.
fn filter_valid(img: &Array2<f32>, k: &[f32; WINDOW]) -> Array2<f32> {
    let (h, w) = img.dim();
    let ow = w - WINDOW + 1;
    let oh = h - WINDOW + 1;
    let mut tmp = Array2::<f32>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            let mut acc = 0.0f32;
            for t in 0..WINDOW {
                acc += img[(i, j + t)] * k[t];
            }
            tmp[(i, j)] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0f32;
            for t in 0..WINDOW {
                acc += tmp[(i + t, j)] * k[t];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

/// Adjoint of `filter_valid`: scatter the output gradient back through the
/// window taps.
fn filter_valid_adjoint(g: &Array2<f32>, k: &[f32; WINDOW], h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = g.dim();
    let mut tmp = Array2::<f32>::zeros((h, ow));
    for i in 0..oh {
        for j in 0..ow {
            let gv = g[(i, j)];
            if gv != 0.0 {
                for t in 0..WINDOW {
                    tmp[(i + t, j)] += gv * k[t];
                }
            }
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..ow {
            let gv = tmp[(i, j)];
            if gv != 0.0 {
                for t in 0..WINDOW {
                    out[(i, j + t)] += gv * k[t];
                }
            }
        }
    }
    out
}

fn downsample2(img: &Array2<f32>) -> Array2<f32> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::<f32>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[(i, j)] = 0.25
                * (img[(2 * i, 2 * j)]
                    + img[(2 * i + 1, 2 * j)]
                    + img[(2 * i, 2 * j + 1)]
                    + img[(2 * i + 1, 2 * j + 1)]);
        }
    }
    out
}

fn downsample2_adjoint(g: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (oh, ow) = g.dim();
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..oh {
        for j in 0..ow {
            let v = 0.25 * g[(i, j)];
            out[(2 * i, 2 * j)] += v;
            out[(2 * i + 1, 2 * j)] += v;
            out[(2 * i, 2 * j + 1)] += v;
            out[(2 * i + 1, 2 * j + 1)] += v;
        }
    }
    out
}

fn channel(img: &Array3<f32>, c: usize) -> Array2<f32> {
    let (h, w, _) = img.dim();
    Array2::from_shape_fn((h, w), |(i, j)| img[(i, j, c)])
}

/// Number of usable scales for an image: the coarsest level must still fit
/// the filter window.
fn usable_scales(h: usize, w: usize) -> usize {
    let mut s = 0usize;
    let (mut hh, mut ww) = (h, w);
    while s < 5 && hh >= WINDOW && ww >= WINDOW {
        s += 1;
        hh /= 2;
        ww /= 2;
    }
    s
}

struct ScaleStats {
    x: Array2<f32>,
    y: Array2<f32>,
    mu_x: Array2<f32>,
    mu_y: Array2<f32>,
    fxx: Array2<f32>,
    fyy: Array2<f32>,
    l_map: Array2<f32>,
    cs_map: Array2<f32>,
    mcs: f64,
    mls: f64,
}

fn scale_stats(x: &Array2<f32>, y: &Array2<f32>, k: &[f32; WINDOW]) -> ScaleStats {
    let mu_x = filter_valid(x, k);
    let mu_y = filter_valid(y, k);
    let fxx = filter_valid(&(x * x), k);
    let fyy = filter_valid(&(y * y), k);
    let fxy = filter_valid(&(x * y), k);
    let dim = mu_x.dim();
    let mut l_map = Array2::<f32>::zeros(dim);
    let mut cs_map = Array2::<f32>::zeros(dim);
    let mut sum_cs = 0.0f64;
    let mut sum_ls = 0.0f64;
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let mx = mu_x[(i, j)] as f64;
            let my = mu_y[(i, j)] as f64;
            let sxx = (fxx[(i, j)] as f64 - mx * mx).max(0.0);
            let syy = (fyy[(i, j)] as f64 - my * my).max(0.0);
            let sxy = fxy[(i, j)] as f64 - mx * my;
            let l = (2.0 * mx * my + C1) / (mx * mx + my * my + C1);
            let cs = (2.0 * sxy + C2) / (sxx + syy + C2);
            l_map[(i, j)] = l as f32;
            cs_map[(i, j)] = cs as f32;
            sum_cs += cs;
            sum_ls += l * cs;
        }
    }
    let count = (dim.0 * dim.1) as f64;
    ScaleStats {
        x: x.clone(),
        y: y.clone(),
        mu_x,
        mu_y,
        fxx,
        fyy,
        l_map,
        cs_map,
        mcs: sum_cs / count,
        mls: sum_ls / count,
    }
}

/// MS-SSIM over RGB in [0, 1]; channels are scored independently and
/// averaged.
pub fn ms_ssim(x: &Array3<f32>, y: &Array3<f32>) -> Result<f64> {
    Ok(ms_ssim_impl(x, y, false)?.0)
}

/// MS-SSIM plus its gradient w.r.t. the second argument.
pub fn ms_ssim_with_grad(x: &Array3<f32>, y: &Array3<f32>) -> Result<(f64, Array3<f32>)> {
    let (v, g) = ms_ssim_impl(x, y, true)?;
    Ok((v, g.unwrap()))
}

fn ms_ssim_impl(
    x: &Array3<f32>,
    y: &Array3<f32>,
    want_grad: bool,
) -> Result<(f64, Option<Array3<f32>>)> {
    if x.dim() != y.dim() {
        return Err(Error::config(format!(
            "ms-ssim needs matching shapes, got {:?} and {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let (h, w, ch) = x.dim();
    let scales = usable_scales(h, w);
    if scales == 0 {
        return Err(Error::config(format!(
            "image {h}x{w} is smaller than the {WINDOW}x{WINDOW} filter window"
        )));
    }
    let mut weights: Vec<f64> = MSSSIM_WEIGHTS[..scales].to_vec();
    if scales < 5 {
        let sum: f64 = weights.iter().sum();
        for wv in &mut weights {
            *wv /= sum;
        }
        log::warn!(
            "image {h}x{w} only supports {scales} ms-ssim scales; weights renormalized"
        );
    }
    let k = gaussian_window();
    let mut total = 0.0f64;
    let mut grad = want_grad.then(|| Array3::<f32>::zeros((h, w, ch)));
    for c in 0..ch {
        let mut xs = channel(x, c);
        let mut ys = channel(y, c);
        let mut stats: Vec<ScaleStats> = Vec::with_capacity(scales);
        for s in 0..scales {
            let st = scale_stats(&xs, &ys, &k);
            if s + 1 < scales {
                let nx = downsample2(&xs);
                let ny = downsample2(&ys);
                xs = nx;
                ys = ny;
            }
            stats.push(st);
        }
        let mut factors = Vec::with_capacity(scales);
        for (s, st) in stats.iter().enumerate() {
            let m = if s + 1 == scales { st.mls } else { st.mcs };
            factors.push(m.max(POS_FLOOR));
        }
        let mut value = 1.0f64;
        for (f, wv) in factors.iter().zip(weights.iter()) {
            value *= f.powf(*wv);
        }
        total += value;
        if let Some(gimg) = grad.as_mut() {
            // walk scales coarse to fine, folding the downsample adjoint in
            let mut gy_next: Option<Array2<f32>> = None;
            for s in (0..scales).rev() {
                let st = &stats[s];
                let m = factors[s];
                let clamped = (if s + 1 == scales { st.mls } else { st.mcs }) < POS_FLOOR;
                let dv_dm = if clamped { 0.0 } else { value * weights[s] / m };
                let gy_scale = scale_grad(st, &k, dv_dm, s + 1 == scales);
                let mut gy = gy_scale;
                if let Some(gn) = gy_next {
                    let (hh, ww) = st.x.dim();
                    gy = gy + downsample2_adjoint(&gn, hh, ww);
                }
                gy_next = Some(gy);
            }
            let gy0 = gy_next.unwrap();
            for i in 0..h {
                for j in 0..w {
                    gimg[(i, j, c)] = gy0[(i, j)] / ch as f32;
                }
            }
        }
    }
    Ok((total / ch as f64, grad))
}

/// Gradient of `dv_dm * mean(map)` w.r.t. the second image at one scale,
/// where map is cs (intermediate scales) or l*cs (last scale).
fn scale_grad(st: &ScaleStats, k: &[f32; WINDOW], dv_dm: f64, last: bool) -> Array2<f32> {
    let dim = st.mu_x.dim();
    let count = (dim.0 * dim.1) as f64;
    let mut g_mu_y = Array2::<f32>::zeros(dim);
    let mut g_fyy = Array2::<f32>::zeros(dim);
    let mut g_fxy = Array2::<f32>::zeros(dim);
    for i in 0..dim.0 {
        for j in 0..dim.1 {
            let mx = st.mu_x[(i, j)] as f64;
            let my = st.mu_y[(i, j)] as f64;
            let sxx = (st.fxx[(i, j)] as f64 - mx * mx).max(0.0);
            let syy_raw = st.fyy[(i, j)] as f64 - my * my;
            let syy = syy_raw.max(0.0);
            let b = sxx + syy + C2;
            let cs = st.cs_map[(i, j)] as f64;
            let l = st.l_map[(i, j)] as f64;
            // the scale mean is mean(cs) or mean(l*cs)
            let (g_cs, g_l) = if last {
                (dv_dm * l / count, dv_dm * cs / count)
            } else {
                (dv_dm / count, 0.0)
            };
            // cs = (2 sxy + C2) / b
            let d_cs_d_sxy = 2.0 / b;
            let d_cs_d_syy = -cs / b;
            // l = (2 mx my + C1) / (mx^2 + my^2 + C1)
            let q = mx * mx + my * my + C1;
            let d_l_d_my = (2.0 * mx - l * 2.0 * my) / q;
            // sxy = fxy - mx*my ; syy = fyy - my^2 (when not clamped)
            let mut gmy = g_l * d_l_d_my + g_cs * d_cs_d_sxy * (-mx);
            if syy_raw > 0.0 {
                gmy += g_cs * d_cs_d_syy * (-2.0 * my);
                g_fyy[(i, j)] = (g_cs * d_cs_d_syy) as f32;
            }
            g_fxy[(i, j)] = (g_cs * d_cs_d_sxy) as f32;
            g_mu_y[(i, j)] = gmy as f32;
        }
    }
    let (h, w) = st.x.dim();
    let t_mu = filter_valid_adjoint(&g_mu_y, k, h, w);
    let t_yy = filter_valid_adjoint(&g_fyy, k, h, w);
    let t_xy = filter_valid_adjoint(&g_fxy, k, h, w);
    let mut out = t_mu;
    for i in 0..h {
        for j in 0..w {
            out[(i, j)] += t_yy[(i, j)] * 2.0 * st.y[(i, j)] + t_xy[(i, j)] * st.x[(i, j)];
        }
    }
    out
}
