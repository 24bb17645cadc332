//! The full codec: analysis/synthesis transforms, quantization, hyperprior
//! entropy model, shallow-channel path, entropy coding and the container.

pub mod bitstream;
pub mod entropy;
pub mod image_io;
pub mod model;
pub mod pipeline;
pub mod quantize;
pub mod rate;
pub mod topk;

pub use model::{CodecConfig, ModelState};
pub use quantize::{quantize_infer, quantize_train};
pub use rate::estimate_rate;
pub use topk::select_topk_channels;

use crate::error::{Error, Result};
use crate::ndutil::{concat_channels, crop, reflect_pad_to_multiple, split_channels};
use bitstream::Header;
use entropy::{OpSink, RansDecoder, SymbolTable};
use ndarray::Array3;
use pipeline::{analyze_forward, hyper_decode_forward, hyper_encode_forward, synth_forward};

/// Quantized-latent magnitudes above this indicate a diverged model rather
/// than codable content.
const MAX_SYMBOL: f32 = 1.0e9;

/// Latents produced for one image: the continuous maps and, once the hyper
/// path has run, their integer-valued quantized counterparts.
#[derive(Debug, Clone)]
pub struct LatentBundle {
    pub y: Array3<f32>,
    pub shallow_k: Array3<f32>,
    pub z: Array3<f32>,
    pub y_hat: Array3<f32>,
    pub s_hat: Array3<f32>,
    pub z_hat: Array3<f32>,
}

impl LatentBundle {
    fn empty() -> Array3<f32> {
        Array3::zeros((0, 0, 0))
    }
}

fn check_lambda(model: &ModelState, lambda: f64) -> Result<f32> {
    let spec = &model.config.lambda_range;
    if !spec.contains(lambda) {
        return Err(Error::domain(format!(
            "tradeoff {lambda} outside the model's range ({}, {})",
            spec.lambda_min, spec.lambda_max
        )));
    }
    Ok(lambda as f32)
}

/// Runs the analysis transform. The input is reflect-padded internally when
/// its dims are not multiples of the stage factor.
pub fn analyze(model: &ModelState, x: &Array3<f32>, lambda: f64) -> Result<LatentBundle> {
    let lf = check_lambda(model, lambda)?;
    let padded = reflect_pad_to_multiple(x, model.config.spatial_factor())?;
    let (y, shallow_k, _, _) = analyze_forward(model, &padded, lf, false)?;
    Ok(LatentBundle {
        y,
        shallow_k,
        z: LatentBundle::empty(),
        y_hat: LatentBundle::empty(),
        s_hat: LatentBundle::empty(),
        z_hat: LatentBundle::empty(),
    })
}

fn to_symbol(v: f32) -> Result<i64> {
    if !v.is_finite() || v.abs() > MAX_SYMBOL {
        return Err(Error::internal(format!(
            "quantized latent value {v} out of codable range"
        )));
    }
    Ok(v as i64)
}

fn prior_tables(model: &ModelState) -> Vec<SymbolTable> {
    (0..model.config.n)
        .map(|k| {
            let mu = model.prior_mu[k] as f64;
            let raw = model.prior_sigma_raw[k] as f64;
            let sigma = crate::blocks::act::softplus(raw) + rate::SIGMA_FLOOR;
            SymbolTable::gaussian(mu, sigma)
        })
        .collect()
}

/// Everything `compress` computes internally, exposed for visualization.
pub struct CompressInfo {
    /// per-stage encoder scale-factor maps
    pub sf_maps: Vec<Array3<f32>>,
    /// per-element model bits of the quantized (latent ‖ shallow) tensor
    pub latent_bits: Array3<f64>,
    pub total_latent_bits: f64,
    pub bundle: LatentBundle,
}

pub fn compress(model: &ModelState, x: &Array3<f32>, lambda: f64) -> Result<Vec<u8>> {
    Ok(compress_with_info(model, x, lambda)?.0)
}

pub fn compress_with_info(
    model: &ModelState,
    x: &Array3<f32>,
    lambda: f64,
) -> Result<(Vec<u8>, CompressInfo)> {
    let lf = check_lambda(model, lambda)?;
    let (h, w, c) = x.dim();
    if c != 3 {
        return Err(Error::config(format!("expected a 3-channel image, got {c}")));
    }
    let padded = reflect_pad_to_multiple(x, model.config.spatial_factor())?;
    let (y, shallow_k, _, caches) = analyze_forward(model, &padded, lf, true)?;
    let (yh, yw, _) = y.dim();
    let joint = if model.config.k_eff() > 0 {
        concat_channels(&y, &shallow_k)?
    } else {
        y.clone()
    };
    let (z, _) = hyper_encode_forward(model, &joint, false)?;
    let z_hat = quantize_infer(&z);
    let (mu, sigma, _) = hyper_decode_forward(model, &z_hat, (yh, yw), false)?;
    let c_hat = quantize_infer(&joint);

    // hyper-latent payload under the per-channel prior
    let tables = prior_tables(model);
    let mut z_sink = OpSink::new();
    let (zh, zw, zc) = z_hat.dim();
    for i in 0..zh {
        for j in 0..zw {
            for k in 0..zc {
                z_sink.push_symbol(&tables[k], to_symbol(z_hat[(i, j, k)])?);
            }
        }
    }
    let z_payload = z_sink.encode();

    // main payload under the decoded Gaussian parameters
    let mut y_sink = OpSink::new();
    let (ch, cw, cc) = c_hat.dim();
    for i in 0..ch {
        for j in 0..cw {
            for k in 0..cc {
                let t = SymbolTable::gaussian(mu[(i, j, k)] as f64, sigma[(i, j, k)] as f64);
                y_sink.push_symbol(&t, to_symbol(c_hat[(i, j, k)])?);
            }
        }
    }
    let y_payload = y_sink.encode();

    let header = Header {
        width: w as u32,
        height: h as u32,
        lambda: lf,
        k: model.config.k_eff() as u16,
    };
    let bytes = bitstream::write_container(&header, &z_payload, &y_payload);

    let latent_bits = rate::elementwise_bits(&c_hat, &mu, &sigma);
    let total_latent_bits = latent_bits.iter().sum();
    let (y_hat, s_hat) = split_channels(&c_hat, model.config.n);
    let sf_maps = caches
        .map(|cc| cc.stages.iter().map(|s| s.sf.clone()).collect())
        .unwrap_or_default();
    let info = CompressInfo {
        sf_maps,
        latent_bits,
        total_latent_bits,
        bundle: LatentBundle {
            y,
            shallow_k,
            z,
            y_hat,
            s_hat,
            z_hat,
        },
    };
    Ok((bytes, info))
}

/// Decode a container back to an RGB image in [0, 1].
pub fn decompress(model: &ModelState, bytes: &[u8]) -> Result<Array3<f32>> {
    Ok(decompress_with_latents(model, bytes)?.0)
}

pub fn decompress_with_latents(
    model: &ModelState,
    bytes: &[u8],
) -> Result<(Array3<f32>, LatentBundle)> {
    let (header, z_payload, y_payload) = bitstream::read_container(bytes)?;
    if header.k as usize != model.config.k_eff() {
        return Err(Error::container(format!(
            "stream carries {} shallow channels but the model expects {}",
            header.k,
            model.config.k_eff()
        )));
    }
    let spec = &model.config.lambda_range;
    if !spec.contains_f32(header.lambda) {
        return Err(Error::container(format!(
            "stream tradeoff {} outside the model's range ({}, {})",
            header.lambda, spec.lambda_min, spec.lambda_max
        )));
    }
    let factor = model.config.spatial_factor();
    let (h, w) = (header.height as usize, header.width as usize);
    let (ph, pw) = (h.div_ceil(factor) * factor, w.div_ceil(factor) * factor);
    let (yh, yw) = model.config.latent_dims(ph, pw);
    let (zh, zw) = model.config.hyper_dims(yh, yw);
    let n = model.config.n;
    let ke = model.config.k_eff();

    let tables = prior_tables(model);
    let mut z_hat = Array3::zeros((zh, zw, n));
    let mut zdec = RansDecoder::new(z_payload)?;
    for i in 0..zh {
        for j in 0..zw {
            for k in 0..n {
                z_hat[(i, j, k)] = zdec.decode_symbol(&tables[k])? as f32;
            }
        }
    }
    if !zdec.finished() {
        return Err(Error::container("hyper payload has trailing garbage"));
    }

    let (mu, sigma, _) = hyper_decode_forward(model, &z_hat, (yh, yw), false)?;
    let mut c_hat = Array3::zeros((yh, yw, n + ke));
    let mut ydec = RansDecoder::new(y_payload)?;
    for i in 0..yh {
        for j in 0..yw {
            for k in 0..n + ke {
                let t = SymbolTable::gaussian(mu[(i, j, k)] as f64, sigma[(i, j, k)] as f64);
                c_hat[(i, j, k)] = ydec.decode_symbol(&t)? as f32;
            }
        }
    }
    if !ydec.finished() {
        return Err(Error::container("latent payload has trailing garbage"));
    }

    let (y_hat, s_hat) = split_channels(&c_hat, n);
    let (xr, _) = synth_forward(model, &y_hat, &s_hat, header.lambda, false)?;
    let clamped = xr.mapv(|v| v.clamp(0.0, 1.0));
    let out = crop(&clamped, h, w);
    let bundle = LatentBundle {
        y: LatentBundle::empty(),
        shallow_k: LatentBundle::empty(),
        z: LatentBundle::empty(),
        y_hat,
        s_hat,
        z_hat,
    };
    Ok((out, bundle))
}

/// The in-memory reference path: analysis, rounding, hyper round-trip and
/// synthesis without entropy coding. `decompress(compress(x))` must match
/// this bit-exactly at the latent level.
pub fn reconstruct_infer(
    model: &ModelState,
    x: &Array3<f32>,
    lambda: f64,
) -> Result<(Array3<f32>, LatentBundle)> {
    let lf = check_lambda(model, lambda)?;
    let (h, w, _) = x.dim();
    let padded = reflect_pad_to_multiple(x, model.config.spatial_factor())?;
    let (y, shallow_k, _, _) = analyze_forward(model, &padded, lf, false)?;
    let joint = if model.config.k_eff() > 0 {
        concat_channels(&y, &shallow_k)?
    } else {
        y.clone()
    };
    let (z, _) = hyper_encode_forward(model, &joint, false)?;
    let z_hat = quantize_infer(&z);
    let c_hat = quantize_infer(&joint);
    let (y_hat, s_hat) = split_channels(&c_hat, model.config.n);
    let (xr, _) = synth_forward(model, &y_hat, &s_hat, lf, false)?;
    let clamped = xr.mapv(|v| v.clamp(0.0, 1.0));
    Ok((
        crop(&clamped, h, w),
        LatentBundle {
            y,
            shallow_k,
            z,
            y_hat,
            s_hat,
            z_hat,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::LambdaSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> ModelState {
        let cfg = CodecConfig::new(6, 4, 2, LambdaSpec::mse_default()).unwrap();
        ModelState::new(cfg, 7).unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |(i, j, _)| {
            let base = ((i as f32 / h as f32) + (j as f32 / w as f32)) * 0.4;
            (base + rng.gen_range(0.0..0.2)).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn compress_is_deterministic() {
        let model = tiny_model();
        let img = random_image(48, 32, 1);
        let a = compress(&model, &img, 0.01).unwrap();
        let b = compress(&model, &img, 0.01).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn roundtrip_matches_reference_path() {
        let model = tiny_model();
        for (h, w, seed) in [(32usize, 32usize, 2u64), (40, 56, 3), (17, 33, 4)] {
            let img = random_image(h, w, seed);
            let bytes = compress(&model, &img, 0.01).unwrap();
            let (decoded, dec_latents) = decompress_with_latents(&model, &bytes).unwrap();
            let (reference, ref_latents) = reconstruct_infer(&model, &img, 0.01).unwrap();
            assert_eq!(decoded.dim(), (h, w, 3));
            assert_eq!(dec_latents.z_hat, ref_latents.z_hat);
            assert_eq!(dec_latents.y_hat, ref_latents.y_hat);
            assert_eq!(dec_latents.s_hat, ref_latents.s_hat);
            for (a, b) in decoded.iter().zip(reference.iter()) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn lambda_outside_range_is_refused() {
        let model = tiny_model();
        let img = random_image(32, 32, 5);
        let err = compress(&model, &img, 9.9).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("0.0016") && msg.contains("0.045"), "{msg}");
    }

    #[test]
    fn corrupted_bytes_always_error() {
        let model = tiny_model();
        let img = random_image(32, 32, 6);
        let bytes = compress(&model, &img, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut m = bytes.clone();
            let pos = rng.gen_range(0..m.len());
            let bit = 1u8 << rng.gen_range(0..8);
            m[pos] ^= bit;
            assert!(decompress(&model, &m).is_err());
        }
        // truncation as well
        assert!(decompress(&model, &bytes[..bytes.len() / 2]).is_err());
    }

    #[test]
    fn k_mismatch_is_refused() {
        let model = tiny_model();
        let img = random_image(32, 32, 9);
        let bytes = compress(&model, &img, 0.01).unwrap();
        let mut cfg2 = model.config.clone();
        cfg2.k = 3;
        cfg2.topk_indices = vec![0, 1, 2];
        let other = ModelState::new(cfg2, 7).unwrap();
        assert!(decompress(&other, &bytes).is_err());
    }

    #[test]
    fn bit_estimate_tracks_payload() {
        let model = tiny_model();
        let img = random_image(64, 64, 10);
        let (bytes, info) = compress_with_info(&model, &img, 0.01).unwrap();
        assert!(info.total_latent_bits > 0.0);
        // payload also carries the hyper-latent and container overhead
        assert!((bytes.len() * 8) as f64 > info.total_latent_bits * 0.5);
    }
}
