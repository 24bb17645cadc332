//! Tradeoff-conditioned rate-distortion training.

pub mod loss;
pub mod optimizer;
pub mod step;

pub use loss::rd_loss;
pub use step::{calibrate_topk, train_loop, train_step, TrainOutcome};

use crate::error::{Error, Result};

/// Distortion metric used by the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mse,
    Msssim,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Metric> {
        match s {
            "mse" => Ok(Metric::Mse),
            "msssim" => Ok(Metric::Msssim),
            other => Err(Error::config(format!(
                "unknown metric '{other}', expected mse or msssim"
            ))),
        }
    }
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::Msssim => "msssim",
        }
    }
}

/// The admissible tradeoff range and the distortion metric it applies to.
#[derive(Debug, Clone, Copy)]
pub struct LambdaSpec {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub metric: Metric,
}

impl LambdaSpec {
    pub fn new(lambda_min: f64, lambda_max: f64, metric: Metric) -> Result<Self> {
        if !(lambda_min > 0.0 && lambda_min < lambda_max && lambda_max.is_finite()) {
            return Err(Error::config(format!(
                "invalid tradeoff range ({lambda_min}, {lambda_max})"
            )));
        }
        Ok(LambdaSpec {
            lambda_min,
            lambda_max,
            metric,
        })
    }

    pub fn mse_default() -> Self {
        LambdaSpec {
            lambda_min: 0.0016,
            lambda_max: 0.045,
            metric: Metric::Mse,
        }
    }

    pub fn msssim_default() -> Self {
        LambdaSpec {
            lambda_min: 5.0,
            lambda_max: 120.0,
            metric: Metric::Msssim,
        }
    }

    pub fn contains(&self, lambda: f64) -> bool {
        lambda >= self.lambda_min && lambda <= self.lambda_max
    }

    /// Range check in single precision, for values that round-tripped
    /// through a stream header.
    pub fn contains_f32(&self, lambda: f32) -> bool {
        lambda >= self.lambda_min as f32 && lambda <= self.lambda_max as f32
    }
}

/// Log-uniform draw from the tradeoff range: bit-rates span orders of
/// magnitude, so coverage is balanced in log space.
pub fn sample_lambda(spec: &LambdaSpec, u: f64) -> f64 {
    let lo = spec.lambda_min.ln();
    let hi = spec.lambda_max.ln();
    (lo + u * (hi - lo)).exp()
}

/// Training loop settings. The iteration budget here is a desk-scale default;
/// the learning-rate drop covers the final `lr_drop_frac` of the run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub crop: usize,
    pub iters: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub lr_drop_frac: f64,
    pub seed: u64,
    pub checkpoint_interval: usize,
    /// Fraction of the budget after which shallow-channel selection is
    /// calibrated and frozen.
    pub calibrate_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            crop: 256,
            iters: 20_000,
            lr: 1e-4,
            lr_final: 1e-5,
            lr_drop_frac: 0.05,
            seed: 0,
            checkpoint_interval: 5_000,
            calibrate_frac: 0.10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.crop == 0 || self.iters == 0 {
            return Err(Error::config(
                "batch size, crop and iteration count must be positive".to_string(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_final > 0.0 && self.lr_final < self.lr) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 < lr_final < lr, got {} and {}",
                self.lr, self.lr_final
            )));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_frac) {
            return Err(Error::config("lr_drop_frac must lie in [0, 1]".to_string()));
        }
        Ok(())
    }

    /// Learning rate at a given iteration.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let cutoff = ((1.0 - self.lr_drop_frac) * self.iters as f64).round() as usize;
        if iter >= cutoff {
            self.lr_final
        } else {
            self.lr
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
    pub seconds: f64,
}

impl TrainRecord {
    pub const CSV_HEADER: &'static str = "iter,lambda,loss,bpp,distortion,seconds";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iteration, self.lambda, self.loss, self.bpp, self.distortion, self.seconds
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_boundaries_map_to_range_ends() {
        let spec = LambdaSpec::mse_default();
        assert!((sample_lambda(&spec, 0.0) - 0.0016).abs() < 1e-12);
        assert!((sample_lambda(&spec, 1.0) - 0.045).abs() < 1e-12);
    }

    #[test]
    fn lambda_midpoint_is_geometric_mean() {
        let spec = LambdaSpec::mse_default();
        let mid = sample_lambda(&spec, 0.5);
        assert!((mid - 0.008485).abs() < 1e-6, "{mid}");
    }

    #[test]
    fn degenerate_range_is_constant() {
        let spec = LambdaSpec {
            lambda_min: 0.01,
            lambda_max: 0.01,
            metric: Metric::Mse,
        };
        for u in [0.0, 0.3, 1.0] {
            assert!((sample_lambda(&spec, u) - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn samples_stay_in_range_and_center_on_geometric_mean() {
        use rand::{Rng, SeedableRng};
        let spec = LambdaSpec::mse_default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut vals: Vec<f64> = (0..100_000)
            .map(|_| sample_lambda(&spec, rng.gen_range(0.0..1.0)))
            .collect();
        assert!(vals
            .iter()
            .all(|l| *l >= spec.lambda_min && *l <= spec.lambda_max));
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = vals[vals.len() / 2];
        let gmean = (spec.lambda_min * spec.lambda_max).sqrt();
        assert!((median - gmean).abs() / gmean < 0.05, "median {median}");
    }

    #[test]
    fn lr_drops_in_the_final_fraction() {
        let cfg = TrainConfig {
            iters: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert_eq!(cfg.lr_at(949), 1e-4);
        assert_eq!(cfg.lr_at(950), 1e-5);
        assert_eq!(cfg.lr_at(999), 1e-5);
    }
}
