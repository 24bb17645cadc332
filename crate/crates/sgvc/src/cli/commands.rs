//! Subcommand implementations.

use crate::cli::Settings;
use crate::codec::model::{CodecConfig, ModelState};
use crate::codec::{compress as codec_compress, decompress as codec_decompress, image_io};
use crate::error::{Error, Result};
use crate::evaluation::ablate::ablation_run;
use crate::evaluation::bd::{bd_metrics, RdCurve};
use crate::evaluation::maps;
use crate::evaluation::sweep::{eval_lambda, sweep_rd, QualityMetric};
use crate::training::{calibrate_topk, train_loop, LambdaSpec, Metric, TrainConfig, TrainRecord};
use ndarray::Array3;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Loads every PNG/PPM in a directory, sorted by file name.
fn load_corpus(dir: &Path) -> Result<Vec<Array3<f32>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("png" | "ppm" | "PNG" | "PPM")
            )
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::data(format!(
            "no PNG/PPM images found in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| image_io::load_image(p)).collect()
}

/// Writes `manifest.csv` (`path,bytes,crc32`) for the listed artifacts.
fn write_manifest(out_dir: &Path, files: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for f in files {
        let bytes = std::fs::read(f)?;
        let rel = f.strip_prefix(out_dir).unwrap_or(f);
        rows.push(format!(
            "{},{},{:08x}",
            rel.display(),
            bytes.len(),
            crc32fast::hash(&bytes)
        ));
    }
    rows.sort();
    let mut out = String::from("path,bytes,crc32\n");
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    std::fs::write(out_dir.join("manifest.csv"), out)?;
    Ok(())
}

fn lambda_spec_from(s: &Settings) -> Result<LambdaSpec> {
    let metric = Metric::parse(s.require("metric")?)?;
    let defaults = match metric {
        Metric::Mse => LambdaSpec::mse_default(),
        Metric::Msssim => LambdaSpec::msssim_default(),
    };
    let lo = s.parse_opt::<f64>("lambda_min")?.unwrap_or(defaults.lambda_min);
    let hi = s.parse_opt::<f64>("lambda_max")?.unwrap_or(defaults.lambda_max);
    LambdaSpec::new(lo, hi, metric)
}

fn train_config_from(s: &Settings) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        batch_size: s.parse("batch_size")?,
        crop: s.parse("crop")?,
        iters: s.parse("iters")?,
        lr: s.parse("lr")?,
        lr_final: s.parse_opt::<f64>("lr_final")?.unwrap_or_else(|| {
            let lr: f64 = s.parse("lr").unwrap_or(1e-4);
            lr / 10.0
        }),
        lr_drop_frac: s.parse_opt::<f64>("lr_drop_frac")?.unwrap_or(0.05),
        seed: s.parse("seed")?,
        checkpoint_interval: s.parse_opt::<usize>("checkpoint_interval")?.unwrap_or(0),
        calibrate_frac: s.parse_opt::<f64>("calibrate_frac")?.unwrap_or(0.1),
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(s: &Settings) -> Result<()> {
    let out_dir = PathBuf::from(s.require("out_dir")?);
    std::fs::create_dir_all(&out_dir)?;
    let cfg = train_config_from(s)?;
    let mut model = match s.get("resume") {
        Some(path) => ModelState::load(Path::new(path))?,
        None => {
            let config = CodecConfig::new(
                s.parse("n")?,
                s.parse("stages")?,
                s.parse("k")?,
                lambda_spec_from(s)?,
            )?;
            config.validate()?;
            ModelState::new(config, cfg.seed)?
        }
    };
    let corpus = load_corpus(Path::new(s.require("dataset_dir")?))?;
    println!(
        "training: {} images, {} iterations, {} parameters",
        corpus.len(),
        cfg.iters,
        model.param_count()
    );
    let log_path = out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "{}", TrainRecord::CSV_HEADER)?;
    let mut artifacts = vec![log_path.clone()];
    let ckpt_dir = out_dir.clone();
    let outcome = train_loop(
        &mut model,
        &corpus,
        &cfg,
        |rec| {
            writeln!(log, "{}", rec.to_csv_row())?;
            Ok(())
        },
        |iter, m| {
            let p = ckpt_dir.join(format!("checkpoint_{iter}.sgvm"));
            m.save(&p)?;
            Ok(())
        },
    )?;
    log.flush()?;
    for iter in (1..=cfg.iters).filter(|i| cfg.checkpoint_interval > 0 && i % cfg.checkpoint_interval == 0)
    {
        artifacts.push(out_dir.join(format!("checkpoint_{iter}.sgvm")));
    }
    let model_path = out_dir.join("model.sgvm");
    model.save(&model_path)?;
    artifacts.push(model_path);
    write_manifest(&out_dir, &artifacts)?;
    if let Some(last) = outcome.records.last() {
        println!(
            "done: final loss {:.4}, bpp {:.4}, distortion {:.4}",
            last.loss, last.bpp, last.distortion
        );
    }
    if let Some(topk) = outcome.calibrated {
        println!("calibrated shallow channels: {topk:?}");
    }
    Ok(())
}

pub fn calibrate(s: &Settings) -> Result<()> {
    let mut model = ModelState::load(Path::new(s.require("model")?))?;
    let limit: usize = s.parse("limit")?;
    let corpus = load_corpus(Path::new(s.require("dataset_dir")?))?;
    let subset: Vec<Array3<f32>> = corpus.into_iter().take(limit).collect();
    let chosen = calibrate_topk(&mut model, &subset)?;
    let out = PathBuf::from(s.require("out")?);
    model.save(&out)?;
    println!("selected shallow channels: {chosen:?}");
    println!("wrote {}", out.display());
    Ok(())
}

pub fn compress(s: &Settings) -> Result<()> {
    let model = ModelState::load(Path::new(s.require("model")?))?;
    let lambda: f64 = s.parse("lambda")?;
    let img = image_io::load_image(Path::new(s.require("in")?))?;
    let bytes = codec_compress(&model, &img, lambda)?;
    let out = PathBuf::from(s.require("out")?);
    std::fs::write(&out, &bytes)?;
    let (h, w, _) = img.dim();
    println!(
        "wrote {} ({} bytes, {:.4} bpp)",
        out.display(),
        bytes.len(),
        (bytes.len() * 8) as f64 / (h * w) as f64
    );
    Ok(())
}

pub fn decompress(s: &Settings) -> Result<()> {
    let model = ModelState::load(Path::new(s.require("model")?))?;
    let bytes = std::fs::read(Path::new(s.require("in")?))
        .map_err(|e| Error::data(format!("cannot read stream: {e}")))?;
    let img = codec_decompress(&model, &bytes)?;
    let out = PathBuf::from(s.require("out")?);
    image_io::save_png(&out, &img)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(s: &Settings) -> Result<()> {
    let model = ModelState::load(Path::new(s.require("model")?))?;
    let images = load_corpus(Path::new(s.require("dataset_dir")?))?;
    let lambdas = s.parse_lambda_list("lambdas")?;
    let metric = QualityMetric::parse(s.require("quality_metric")?)?;
    let out_dir = PathBuf::from(s.require("out_dir")?);
    std::fs::create_dir_all(&out_dir)?;
    let per_image_path = out_dir.join("per_image.csv");
    let mut per_image = std::io::BufWriter::new(std::fs::File::create(&per_image_path)?);
    writeln!(per_image, "lambda,image,bpp,psnr_db,msssim_db")?;
    for &l in &lambdas {
        for row in eval_lambda(&model, &images, l)? {
            writeln!(
                per_image,
                "{},{},{},{},{}",
                row.lambda, row.image_index, row.bpp, row.psnr_db, row.msssim_db
            )?;
        }
    }
    per_image.flush()?;
    let curve = sweep_rd(&model, &images, &lambdas, metric)?;
    let points_path = out_dir.join("rd_points.csv");
    curve.write_csv(&points_path)?;
    let plot_path = out_dir.join("rd_plot.png");
    crate::evaluation::plot::save_rd_plot(&plot_path, &[&curve], metric.name())?;
    write_manifest(&out_dir, &[per_image_path, points_path, plot_path])?;
    for p in &curve.points {
        println!("{}: bpp {:.4}, {} {:.3}", p.label, p.bpp, metric.name(), p.quality);
    }
    Ok(())
}

pub fn bdrate(s: &Settings) -> Result<()> {
    let anchor = RdCurve::read_csv(Path::new(s.require("anchor")?))?;
    let test = RdCurve::read_csv(Path::new(s.require("test")?))?;
    let (rate, quality) = bd_metrics(&anchor, &test)?;
    println!("BD-Rate: {rate:.1}%");
    println!("BD-PSNR: {quality:.2} dB");
    Ok(())
}

pub fn dump_maps(s: &Settings) -> Result<()> {
    let model = ModelState::load(Path::new(s.require("model")?))?;
    let img = image_io::load_image(Path::new(s.require("in")?))?;
    let lambda: f64 = s.parse("lambda")?;
    let out_dir = PathBuf::from(s.require("out_dir")?);
    let (bundle, files) = maps::dump_maps(&model, &img, lambda, &out_dir)?;
    write_manifest(&out_dir, &files)?;
    println!(
        "wrote {} files; latent total {:.1} bits",
        files.len(),
        bundle.total_latent_bits
    );
    Ok(())
}

pub fn ablate(s: &Settings) -> Result<()> {
    let corpus = load_corpus(Path::new(s.require("dataset_dir")?))?;
    let test_images = load_corpus(Path::new(s.require("test_dir")?))?;
    let lambdas = s.parse_lambda_list("lambdas")?;
    let out_dir = PathBuf::from(s.require("out_dir")?);
    std::fs::create_dir_all(&out_dir)?;
    let cfg = TrainConfig {
        batch_size: s.parse("batch_size")?,
        crop: s.parse("crop")?,
        iters: s.parse("iters")?,
        lr: s.parse("lr")?,
        lr_final: s.parse::<f64>("lr")? / 10.0,
        lr_drop_frac: 0.05,
        seed: s.parse("seed")?,
        checkpoint_interval: 0,
        calibrate_frac: 0.1,
    };
    cfg.validate()?;
    let base = CodecConfig::new(
        s.parse("n")?,
        s.parse("stages")?,
        s.parse("k")?,
        LambdaSpec::mse_default(),
    )?;
    let report = ablation_run(&base, &corpus, &test_images, &cfg, &lambdas)?;
    let report_path = out_dir.join("ablation_report.csv");
    report.write_csv(&report_path)?;
    write_manifest(&out_dir, &[report_path])?;
    for r in &report.results {
        println!(
            "scheme {}: {} params, BD-Rate vs A {:.2}%, BD-PSNR vs A {:.2} dB",
            r.scheme.label, r.params, r.bd_rate_vs_a, r.bd_psnr_vs_a
        );
    }
    Ok(())
}
