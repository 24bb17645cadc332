// scratch: tune the smoke-training profile for the trained-trend checks
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgvc::codec::model::{CodecConfig, ModelState};
use sgvc::evaluation::sweep::sweep_averages;
use sgvc::training::{train_loop, LambdaSpec, TrainConfig};

fn synth_image(h: usize, w: usize, seed: u64) -> Array3<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15));
    let (gx, gy) = (rng.gen_range(-0.5..0.5f32), rng.gen_range(-0.5..0.5f32));
    let base: [f32; 3] = [
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
        rng.gen_range(0.2..0.8),
    ];
    let mut img = Array3::zeros((h, w, 3));
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let v = base[c] + gx * (j as f32 / w as f32 - 0.5) + gy * (i as f32 / h as f32 - 0.5);
                img[(i, j, c)] = v;
            }
        }
    }
    // rectangles
    for _ in 0..rng.gen_range(2..5) {
        let rh = rng.gen_range(h / 8..h / 2);
        let rw = rng.gen_range(w / 8..w / 2);
        let i0 = rng.gen_range(0..h - rh);
        let j0 = rng.gen_range(0..w - rw);
        let col: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        for i in i0..i0 + rh {
            for j in j0..j0 + rw {
                for c in 0..3 {
                    img[(i, j, c)] = 0.7 * col[c] + 0.3 * img[(i, j, c)];
                }
            }
        }
    }
    // texture band
    let fx = rng.gen_range(0.2..0.9f32);
    let fy = rng.gen_range(0.2..0.9f32);
    let amp = rng.gen_range(0.05..0.15f32);
    let band_top = rng.gen_range(0..h / 2);
    let band_bot = band_top + rng.gen_range(h / 4..h / 2);
    for i in band_top..band_bot.min(h) {
        for j in 0..w {
            let t = amp * ((i as f32 * fy).sin() * (j as f32 * fx).cos());
            for c in 0..3 {
                img[(i, j, c)] += t;
            }
        }
    }
    // light sensor noise
    img.mapv_inplace(|v| v + 0.0);
    for v in img.iter_mut() {
        *v = (*v + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
    }
    img
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let n: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(24);
    let crop: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(48);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let corpus: Vec<Array3<f32>> = (0..40).map(|s| synth_image(96, 96, s)).collect();
    let test: Vec<Array3<f32>> = (0..20).map(|s| synth_image(64, 64, 1000 + s)).collect();
    let cfg = CodecConfig::new(n, 4, 4.min(n), LambdaSpec::mse_default()).unwrap();
    let mut model = ModelState::new(cfg, 0).unwrap();
    println!("params: {}", model.param_count());
    let tc = TrainConfig {
        batch_size: 4,
        crop,
        iters,
        lr,
        lr_final: lr / 10.0,
        lr_drop_frac: 0.05,
        seed: 0,
        checkpoint_interval: 0,
        calibrate_frac: 0.1,
    };
    let t0 = std::time::Instant::now();
    let outcome = train_loop(&mut model, &corpus, &tc, |r| {
        if r.iteration % 100 == 0 {
            println!(
                "iter {:5}  loss {:9.4}  bpp {:7.4}  dist {:9.2}  lambda {:.5}",
                r.iteration, r.loss, r.bpp, r.distortion, r.lambda
            );
        }
        Ok(())
    }, |_, _| Ok(())).unwrap();
    println!("trained {} iters in {:.1}s", iters, t0.elapsed().as_secs_f64());
    let first: f64 = outcome.records.iter().take(iters / 10).map(|r| r.loss).sum::<f64>() / (iters / 10) as f64;
    let last: f64 = outcome.records.iter().rev().take(iters / 10).map(|r| r.loss).sum::<f64>() / (iters / 10) as f64;
    println!("mean loss first 10%: {first:.3}, last 10%: {last:.3}, drop {:.1}%", 100.0 * (first - last) / first);
    let grid = [0.0016, 0.003, 0.0075, 0.015, 0.045];
    let t1 = std::time::Instant::now();
    let avgs = sweep_averages(&model, &test, &grid).unwrap();
    println!("sweep in {:.1}s", t1.elapsed().as_secs_f64());
    for (l, bpp, psnr) in &avgs {
        println!("lambda {l:7.4}  bpp {bpp:7.4}  psnr {psnr:6.2}");
    }
}
