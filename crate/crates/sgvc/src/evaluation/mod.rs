//! Evaluation: quality metrics, rate-quality curves, Bjontegaard deltas,
//! visualization maps and the ablation harness.

pub mod ablate;
pub mod bd;
pub mod maps;
pub mod metrics;
pub mod plot;
pub mod sweep;

pub use ablate::{ablation_run, AblationReport, SchemeSpec};
pub use bd::{bd_metrics, load_reference_bd, RdCurve, RdPoint};
pub use maps::{dump_maps, HeatmapBundle};
pub use metrics::{ms_ssim, msssim_db, psnr};
pub use sweep::{sweep_rd, QualityMetric};
