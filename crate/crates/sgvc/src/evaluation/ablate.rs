//! Ablation harness: trains scheme variants under one seed and budget and
//! reports their parameter counts and rate deltas against the plain
//! variable-rate baseline.
//!
//! Scheme A keeps the scaling network but feeds it a flat importance map and
//! applies no gating; B adds the gating unit; C adds shallow-feature fusion.

use crate::codec::model::{CodecConfig, ModelState};
use crate::error::{Error, Result};
use crate::evaluation::bd::bd_metrics;
use crate::evaluation::sweep::{sweep_rd, QualityMetric};
use crate::training::{train_loop, TrainConfig};
use ndarray::Array3;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchemeSpec {
    pub label: char,
    pub use_sgu: bool,
    pub use_sffm: bool,
}

pub const SCHEMES: [SchemeSpec; 3] = [
    SchemeSpec { label: 'A', use_sgu: false, use_sffm: false },
    SchemeSpec { label: 'B', use_sgu: true, use_sffm: false },
    SchemeSpec { label: 'C', use_sgu: true, use_sffm: true },
];

#[derive(Debug, Clone)]
pub struct SchemeResult {
    pub scheme: SchemeSpec,
    pub params: usize,
    pub bd_rate_vs_a: f64,
    pub bd_psnr_vs_a: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub results: Vec<SchemeResult>,
    pub lambda_grid: Vec<f64>,
}

impl AblationReport {
    pub const CSV_HEADER: &'static str =
        "scheme,use_ssn,use_sgu,use_sffm,params,bd_rate_pct_vs_a,bd_psnr_db_vs_a";

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.results {
            out.push_str(&format!(
                "{},true,{},{},{},{},{}\n",
                r.scheme.label,
                r.scheme.use_sgu,
                r.scheme.use_sffm,
                r.params,
                r.bd_rate_vs_a,
                r.bd_psnr_vs_a
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<AblationReport> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::data("empty report"))?;
        if header != Self::CSV_HEADER {
            return Err(Error::data(format!("unexpected report header '{header}'")));
        }
        let mut results = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 7 {
                return Err(Error::data(format!("bad report row '{line}'")));
            }
            let parse_bool = |s: &str| -> Result<bool> {
                s.parse()
                    .map_err(|_| Error::data(format!("bad flag '{s}'")))
            };
            results.push(SchemeResult {
                scheme: SchemeSpec {
                    label: cols[0].chars().next().unwrap_or('?'),
                    use_sgu: parse_bool(cols[2])?,
                    use_sffm: parse_bool(cols[3])?,
                },
                params: cols[4]
                    .parse()
                    .map_err(|_| Error::data("bad parameter count"))?,
                bd_rate_vs_a: cols[5]
                    .parse()
                    .map_err(|_| Error::data("bad rate delta"))?,
                bd_psnr_vs_a: cols[6]
                    .parse()
                    .map_err(|_| Error::data("bad quality delta"))?,
            });
        }
        Ok(AblationReport {
            results,
            lambda_grid: Vec::new(),
        })
    }
}

/// Builds, trains and evaluates all three schemes under the same seed and
/// budget.
pub fn ablation_run(
    base: &CodecConfig,
    corpus: &[Array3<f32>],
    test_images: &[Array3<f32>],
    cfg: &TrainConfig,
    lambda_grid: &[f64],
) -> Result<AblationReport> {
    if lambda_grid.len() < 4 {
        return Err(Error::config(format!(
            "ablation needs at least 4 tradeoff values for the rate-delta fit, got {}",
            lambda_grid.len()
        )));
    }
    let mut curves = Vec::new();
    let mut results: Vec<SchemeResult> = Vec::new();
    for scheme in SCHEMES {
        let mut config = base.clone();
        config.use_sgu = scheme.use_sgu;
        config.use_sffm = scheme.use_sffm;
        config.validate()?;
        let mut model = ModelState::new(config, cfg.seed)?;
        log::info!(
            "ablation scheme {}: {} parameters",
            scheme.label,
            model.param_count()
        );
        train_loop(&mut model, corpus, cfg, |_| Ok(()), |_, _| Ok(()))?;
        let curve = sweep_rd(&model, test_images, lambda_grid, QualityMetric::Psnr)?;
        results.push(SchemeResult {
            scheme,
            params: model.param_count(),
            bd_rate_vs_a: 0.0,
            bd_psnr_vs_a: 0.0,
        });
        curves.push(curve);
    }
    for i in 1..results.len() {
        let (rate, quality) = bd_metrics(&curves[0], &curves[i])?;
        results[i].bd_rate_vs_a = rate;
        results[i].bd_psnr_vs_a = quality;
    }
    Ok(AblationReport {
        results,
        lambda_grid: lambda_grid.to_vec(),
    })
}
