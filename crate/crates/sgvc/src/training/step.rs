//! The training step: forward through analysis, noisy quantization, the
//! hyper path and synthesis, then backprop of the rate-distortion loss into
//! a gradient mirror of the model. Batch items run in parallel and are
//! reduced in a fixed order, so a fixed seed reproduces runs bit for bit.

use crate::codec::model::ModelState;
use crate::codec::pipeline::{
    analyze_backward, analyze_forward, hyper_decode_backward, hyper_decode_forward,
    hyper_encode_backward, hyper_encode_forward, prior_backward, prior_params, synth_backward,
    synth_forward,
};
use crate::codec::quantize::quantize_train;
use crate::codec::rate::{estimate_rate, rate_backward};
use crate::codec::topk::select_topk_channels;
use crate::error::{Error, Result};
use crate::ndutil::{concat_channels, reflect_pad_to_multiple, split_channels};
use crate::training::loss::distortion_with_grad;
use crate::training::optimizer::{clip_global_norm, Adam};
use crate::training::{sample_lambda, TrainConfig, TrainRecord};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const GRAD_CLIP_NORM: f64 = 1.0;
/// Calibration runs over at most this many corpus images.
const CALIBRATION_LIMIT: usize = 64;

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct SampleOutcome {
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
}

/// Forward pass (and optional backward) for one crop at one tradeoff.
/// The noise seed freezes the quantization surrogate, so two calls with the
/// same arguments produce identical numbers.
pub fn sample_forward(
    model: &ModelState,
    x: &Array3<f32>,
    lambda: f32,
    noise_seed: u64,
    mut grads: Option<&mut ModelState>,
) -> Result<SampleOutcome> {
    let want = grads.is_some();
    let (h, w, _) = x.dim();
    let factor = model.config.spatial_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::config(format!(
            "training crops must be multiples of {factor}, got {h}x{w}"
        )));
    }
    let n = model.config.n;
    let ke = model.config.k_eff();
    let (y, shallow_k, _, enc_cache) = analyze_forward(model, x, lambda, want)?;
    let joint = if ke > 0 {
        concat_channels(&y, &shallow_k)?
    } else {
        y.clone()
    };
    let (z, henc_cache) = hyper_encode_forward(model, &joint, want)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let z_tilde = quantize_train(&z, &mut noise_rng);
    let c_tilde = quantize_train(&joint, &mut noise_rng);
    let (yh, yw, _) = y.dim();
    let (mu, sigma, hdec_cache) = hyper_decode_forward(model, &z_tilde, (yh, yw), want)?;
    let (prior_mu, prior_sigma) = prior_params(model, z_tilde.dim());
    let rate_main = estimate_rate(&c_tilde, &mu, &sigma);
    let rate_hyper = estimate_rate(&z_tilde, &prior_mu, &prior_sigma);
    let pixels = (h * w) as f64;
    let bpp = (rate_main + rate_hyper) / pixels;
    let (y_tilde, s_tilde) = split_channels(&c_tilde, n);
    let (x_hat, synth_cache) = synth_forward(model, &y_tilde, &s_tilde, lambda, want)?;
    let metric = model.config.lambda_range.metric;
    let (distortion, d_grad) = distortion_with_grad(x, &x_hat, metric)?;
    let loss = bpp + lambda as f64 * distortion;

    if let Some(g) = grads.as_deref_mut() {
        let g_xhat = d_grad.mapv(|v| v * lambda);
        let (g_yt, g_st) = synth_backward(model, synth_cache.as_ref().unwrap(), &g_xhat, g);
        let g_c_dec = if ke > 0 {
            concat_channels(&g_yt, &g_st)?
        } else {
            g_yt
        };
        let inv_pixels = 1.0 / pixels;
        let (g_ct_rate, g_mu, g_sigma) = rate_backward(&c_tilde, &mu, &sigma, inv_pixels);
        let g_c_tilde = g_c_dec + &g_ct_rate;
        let (g_zt_rate, g_pmu, g_psigma) =
            rate_backward(&z_tilde, &prior_mu, &prior_sigma, inv_pixels);
        prior_backward(model, &g_pmu, &g_psigma, g);
        let g_z_hyper =
            hyper_decode_backward(model, hdec_cache.as_ref().unwrap(), &g_mu, &g_sigma, g);
        let g_z_tilde = g_zt_rate + &g_z_hyper;
        let g_joint_hyper =
            hyper_encode_backward(model, henc_cache.as_ref().unwrap(), &g_z_tilde, g);
        let g_joint = g_c_tilde + &g_joint_hyper;
        let (g_y, g_s) = split_channels(&g_joint, n);
        analyze_backward(model, enc_cache.as_ref().unwrap(), &g_y, &g_s, g);
    }
    Ok(SampleOutcome {
        loss,
        bpp,
        distortion,
    })
}

fn add_grads(acc: &mut ModelState, mut other: ModelState) {
    let mut a = Vec::new();
    acc.visit_tensors_mut(&mut a);
    let mut b = Vec::new();
    other.visit_tensors_mut(&mut b);
    for ((_, pa), (_, pb)) in a.iter_mut().zip(b.iter_mut()) {
        for i in 0..pa.len() {
            pa[i] += pb[i];
        }
    }
}

fn scale_grads(g: &mut ModelState, s: f32) {
    let mut slots = Vec::new();
    g.visit_tensors_mut(&mut slots);
    for (_, p) in slots {
        for v in p.iter_mut() {
            *v *= s;
        }
    }
}

/// One optimizer update over a batch of crops. A single tradeoff value is
/// sampled per batch.
pub fn train_step(
    model: &mut ModelState,
    batch: &[Array3<f32>],
    opt: &mut Adam,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<TrainRecord> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    let started = std::time::Instant::now();
    let spec = model.config.lambda_range;
    let mut step_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, iter as u64, 0x17));
    let lambda = sample_lambda(&spec, step_rng.gen_range(0.0..1.0));
    let lf = lambda as f32;
    let frozen: &ModelState = model;
    let results: Vec<Result<(SampleOutcome, ModelState)>> = batch
        .par_iter()
        .enumerate()
        .map(|(si, crop)| {
            let mut g = frozen.zeros_like();
            let seed = mix_seed(cfg.seed, iter as u64, 1000 + si as u64);
            let out = sample_forward(frozen, crop, lf, seed, Some(&mut g))?;
            Ok((out, g))
        })
        .collect();
    let mut grads = model.zeros_like();
    let mut loss = 0.0f64;
    let mut bpp = 0.0f64;
    let mut distortion = 0.0f64;
    for r in results {
        let (out, g) = r?;
        loss += out.loss;
        bpp += out.bpp;
        distortion += out.distortion;
        add_grads(&mut grads, g);
    }
    let nb = batch.len() as f64;
    loss /= nb;
    bpp /= nb;
    distortion /= nb;
    if !loss.is_finite() {
        return Err(Error::internal(format!(
            "non-finite loss at iteration {iter}: loss={loss} bpp={bpp} distortion={distortion} lambda={lambda}"
        )));
    }
    scale_grads(&mut grads, 1.0 / nb as f32);
    clip_global_norm(&mut grads, GRAD_CLIP_NORM);
    opt.step(model, &mut grads, cfg.lr_at(iter));
    Ok(TrainRecord {
        iteration: iter,
        lambda,
        loss,
        bpp,
        distortion,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Per-channel mean absolute activation of the shallow layer over a set of
/// images.
pub fn shallow_stats(model: &ModelState, images: &[Array3<f32>]) -> Result<Vec<f64>> {
    if images.is_empty() {
        return Err(Error::config("empty calibration set"));
    }
    let n = model.config.n;
    let mut acc = vec![0.0f64; n];
    let mut count = 0usize;
    for img in images {
        let padded = reflect_pad_to_multiple(img, model.config.spatial_factor())?;
        let pre = model.enc[0].conv.forward(&padded)?;
        let f = crate::blocks::act::leaky_relu(&pre);
        let (h, w, _) = f.dim();
        for i in 0..h {
            for j in 0..w {
                for k in 0..n {
                    acc[k] += f[(i, j, k)].abs() as f64;
                }
            }
        }
        count += h * w;
    }
    Ok(acc.into_iter().map(|a| a / count as f64).collect())
}

/// Measures shallow-channel informativeness and freezes the selection into
/// the model.
pub fn calibrate_topk(model: &mut ModelState, images: &[Array3<f32>]) -> Result<Vec<usize>> {
    let stats = shallow_stats(model, images)?;
    let chosen = select_topk_channels(&stats, model.config.k)?;
    model.config.topk_indices = chosen.clone();
    Ok(chosen)
}

fn random_crop(img: &Array3<f32>, crop: usize, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
    let (h, w, _) = img.dim();
    if h < crop || w < crop {
        return Err(Error::data(format!(
            "training image {h}x{w} smaller than crop {crop}"
        )));
    }
    let i0 = rng.gen_range(0..=h - crop);
    let j0 = rng.gen_range(0..=w - crop);
    let flip = rng.gen_bool(0.5);
    let mut out = Array3::zeros((crop, crop, 3));
    for i in 0..crop {
        for j in 0..crop {
            let sj = if flip { j0 + crop - 1 - j } else { j0 + j };
            for c in 0..3 {
                out[(i, j, c)] = img[(i0 + i, sj, c)];
            }
        }
    }
    Ok(out)
}

pub fn sample_batch(
    corpus: &[Array3<f32>],
    cfg: &TrainConfig,
    iter: usize,
) -> Result<Vec<Array3<f32>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, iter as u64, 0x51));
    (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.gen_range(0..corpus.len());
            random_crop(&corpus[idx], cfg.crop, &mut rng)
        })
        .collect()
}

pub struct TrainOutcome {
    pub records: Vec<TrainRecord>,
    pub calibrated: Option<Vec<usize>>,
}

/// Runs the full training loop: per-iteration batches, the mid-run shallow
/// calibration, checkpoints and the record stream.
pub fn train_loop(
    model: &mut ModelState,
    corpus: &[Array3<f32>],
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord) -> Result<()>,
    mut on_checkpoint: impl FnMut(usize, &ModelState) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::data("empty training corpus"));
    }
    let mut opt = Adam::new(model);
    let calibrate_at = model
        .config
        .use_sffm
        .then(|| ((cfg.calibrate_frac * cfg.iters as f64).floor() as usize).max(1));
    let mut calibrated = None;
    let mut records = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        if calibrate_at == Some(iter) {
            let subset: Vec<Array3<f32>> = corpus.iter().take(CALIBRATION_LIMIT).cloned().collect();
            calibrated = Some(calibrate_topk(model, &subset)?);
            log::info!("calibrated shallow channels at iteration {iter}: {calibrated:?}");
        }
        let batch = sample_batch(corpus, cfg, iter)?;
        let rec = train_step(model, &batch, &mut opt, cfg, iter)?;
        on_record(&rec)?;
        if cfg.checkpoint_interval > 0 && (iter + 1) % cfg.checkpoint_interval == 0 {
            on_checkpoint(iter + 1, model)?;
        }
        records.push(rec);
    }
    Ok(TrainOutcome {
        records,
        calibrated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::model::CodecConfig;
    use crate::training::LambdaSpec;

    fn tiny_model() -> ModelState {
        let cfg = CodecConfig::new(6, 2, 2, LambdaSpec::mse_default()).unwrap();
        ModelState::new(cfg, 3).unwrap()
    }

    fn test_image(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |(i, j, c)| {
            let v = ((i as f32 * 0.2).sin() + (j as f32 * 0.15).cos()) * 0.2 + 0.5;
            (v + c as f32 * 0.02 + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn sample_forward_is_reproducible() {
        let model = tiny_model();
        let x = test_image(16, 16, 1);
        let a = sample_forward(&model, &x, 0.01, 42, None).unwrap();
        let b = sample_forward(&model, &x, 0.01, 42, None).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert_eq!(a.bpp.to_bits(), b.bpp.to_bits());
    }

    #[test]
    fn train_step_is_bitwise_reproducible() {
        let cfg = TrainConfig {
            batch_size: 2,
            crop: 16,
            iters: 4,
            seed: 7,
            ..TrainConfig::default()
        };
        let corpus: Vec<Array3<f32>> = (0..3).map(|s| test_image(24, 24, s)).collect();
        let run = |_: ()| -> Vec<f64> {
            let mut model = tiny_model();
            let mut opt = Adam::new(&model);
            let mut out = Vec::new();
            for iter in 0..cfg.iters {
                let batch = sample_batch(&corpus, &cfg, iter).unwrap();
                let rec = train_step(&mut model, &batch, &mut opt, &cfg, iter).unwrap();
                out.push(rec.loss);
                out.push(rec.lambda);
            }
            out
        };
        let a = run(());
        let b = run(());
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let model = tiny_model();
        let x = test_image(16, 16, 2);
        let lambda = 0.0016f32;
        let seed = 11u64;
        let mut grads = model.zeros_like();
        sample_forward(&model, &x, lambda, seed, Some(&mut grads)).unwrap();

        // full-gradient check: directional derivative along a random
        // direction over every parameter
        let mut dir_rng = ChaCha8Rng::seed_from_u64(77);
        let mut gflat = Vec::new();
        grads.visit_tensors_mut(&mut gflat);
        let dirs: Vec<Vec<f32>> = gflat
            .iter()
            .map(|(_, s)| (0..s.len()).map(|_| dir_rng.gen_range(-1.0..1.0f32)).collect())
            .collect();
        let dot: f64 = gflat
            .iter()
            .zip(dirs.iter())
            .map(|((_, g), d)| {
                g.iter().zip(d.iter()).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>()
            })
            .sum();
        let h = 3e-5f32;
        let eval_dir = |sign: f32| -> f64 {
            let mut m = model.clone();
            let mut slots = Vec::new();
            m.visit_tensors_mut(&mut slots);
            for ((_, s), d) in slots.iter_mut().zip(dirs.iter()) {
                for i in 0..s.len() {
                    s[i] += sign * h * d[i];
                }
            }
            drop(slots);
            sample_forward(&m, &x, lambda, seed, None).unwrap().loss
        };
        let fd = (eval_dir(1.0) - eval_dir(-1.0)) / (2.0 * h as f64);
        let rel = (dot - fd).abs() / dot.abs().max(fd.abs());
        assert!(rel < 5e-3, "directional: analytic {dot} vs fd {fd} (rel {rel})");

        // and a sampled encoder parameter on its own
        let named: std::collections::HashMap<String, Vec<f32>> =
            gflat.iter().map(|(n, s)| (n.clone(), s.to_vec())).collect();
        let name = "enc0.conv.w";
        let idx = 7usize;
        let analytic = named[name][idx] as f64;
        let hp = 3e-4f32;
        let eval_one = |delta: f32| -> f64 {
            let mut m = model.clone();
            let mut slots = Vec::new();
            m.visit_tensors_mut(&mut slots);
            let slot = slots.iter_mut().find(|(n, _)| n == name).unwrap();
            slot.1[idx] += delta;
            drop(slots);
            sample_forward(&m, &x, lambda, seed, None).unwrap().loss
        };
        let fd1 = (eval_one(hp) - eval_one(-hp)) / (2.0 * hp as f64);
        let err = (analytic - fd1).abs() / analytic.abs().max(fd1.abs()).max(1e-2);
        assert!(err < 5e-3, "{name}[{idx}]: analytic {analytic} vs fd {fd1} (err {err})");
    }

    #[test]
    fn calibration_ranks_louder_copies_higher() {
        let mut model = tiny_model();
        // channel 5 is a 10x copy of channel 3 at the first conv; all other
        // channels silenced so the ranking is fully determined
        let w3 = model.enc[0].conv.weight.clone();
        for a in 0..5 {
            for b in 0..5 {
                for ci in 0..3 {
                    for co in 0..6 {
                        if co != 3 {
                            model.enc[0].conv.weight[(a, b, ci, co)] = 0.0;
                        }
                    }
                    model.enc[0].conv.weight[(a, b, ci, 5)] = 10.0 * w3[(a, b, ci, 3)];
                }
            }
        }
        let images: Vec<Array3<f32>> = (0..3).map(|s| test_image(24, 24, 40 + s)).collect();
        let stats = shallow_stats(&model, &images).unwrap();
        assert!(stats[5] > stats[3], "{stats:?}");
        let chosen = calibrate_topk(&mut model, &images).unwrap();
        assert_eq!(chosen, vec![3, 5]);
        assert_eq!(model.config.topk_indices, chosen);
    }

    #[test]
    fn calibration_is_deterministic_on_identical_images() {
        let mut m1 = tiny_model();
        let mut m2 = tiny_model();
        let images = vec![test_image(24, 24, 9); 4];
        let a = calibrate_topk(&mut m1, &images).unwrap();
        let b = calibrate_topk(&mut m2, &images).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_calibration_set_is_a_configuration_error() {
        let mut model = tiny_model();
        assert!(calibrate_topk(&mut model, &[]).is_err());
    }
}
