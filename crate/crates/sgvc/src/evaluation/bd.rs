//! Rate-quality curves and Bjontegaard deltas.
//!
//! Both deltas use the classic construction: a cubic polynomial is fitted to
//! each curve (log10 rate against quality, or quality against log10 rate),
//! the difference is integrated over the overlapping range, and the average
//! becomes a percent rate delta or a dB quality delta.

use crate::error::{Error, Result};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct RdPoint {
    pub label: String,
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Debug, Clone)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts by bpp and validates: finite values, positive rates, strictly
    /// increasing bpp.
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        for p in &points {
            if !(p.bpp.is_finite() && p.bpp > 0.0 && p.quality.is_finite()) {
                return Err(Error::data(format!(
                    "invalid rate-quality point ({}, {})",
                    p.bpp, p.quality
                )));
            }
        }
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
        for w in points.windows(2) {
            if w[0].bpp >= w[1].bpp {
                return Err(Error::data(format!(
                    "duplicate rate value {} in curve",
                    w[0].bpp
                )));
            }
        }
        Ok(RdCurve {
            label: label.into(),
            points,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "label,bpp,quality")?;
        for p in &self.points {
            writeln!(f, "{},{},{}", p.label, p.bpp, p.quality)?;
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
        let mut rdr = csv::Reader::from_reader(raw.as_bytes());
        let mut points = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::data(format!("bad csv row: {e}")))?;
            if rec.len() != 3 {
                return Err(Error::data(format!(
                    "expected 3 columns (label,bpp,quality), got {}",
                    rec.len()
                )));
            }
            points.push(RdPoint {
                label: rec[0].to_string(),
                bpp: rec[1]
                    .parse()
                    .map_err(|_| Error::data(format!("bad bpp value '{}'", &rec[1])))?,
                quality: rec[2]
                    .parse()
                    .map_err(|_| Error::data(format!("bad quality value '{}'", &rec[2])))?,
            });
        }
        let label = points
            .first()
            .map(|p| p.label.clone())
            .unwrap_or_else(|| "curve".to_string());
        RdCurve::new(label, points)
    }

    fn qualities(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.quality).collect()
    }
    fn log_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp.log10()).collect()
    }
}

/// Least-squares cubic fit on the normalized variable t = (x - c) / s.
fn fit_cubic(xs: &[f64], ys: &[f64], c: f64, s: f64) -> [f64; 4] {
    let mut ata = [[0.0f64; 4]; 4];
    let mut atb = [0.0f64; 4];
    for (x, y) in xs.iter().zip(ys.iter()) {
        let t = (x - c) / s;
        let row = [1.0, t, t * t, t * t * t];
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * y;
        }
    }
    solve4(ata, atb)
}

fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> [f64; 4] {
    for col in 0..4 {
        let mut piv = col;
        for r in col + 1..4 {
            if a[r][col].abs() > a[piv][col].abs() {
                piv = r;
            }
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let d = a[col][col];
        for r in 0..4 {
            if r != col && a[r][col] != 0.0 {
                let f = a[r][col] / d;
                for cc in col..4 {
                    a[r][cc] -= f * a[col][cc];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = b[i] / a[i][i];
    }
    out
}

/// Mean of the fitted polynomial over t in [-1, 1].
fn mean_over_unit(coef: &[f64; 4]) -> f64 {
    // odd powers integrate to zero over a symmetric interval
    coef[0] + coef[2] / 3.0
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let amin = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let amax = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bmin = b.iter().cloned().fold(f64::INFINITY, f64::min);
    let bmax = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo = amin.max(bmin);
    let hi = amax.min(bmax);
    if !(hi > lo) {
        return Err(Error::data(format!(
            "curves do not overlap: [{amin}, {amax}] vs [{bmin}, {bmax}]"
        )));
    }
    Ok((lo, hi))
}

fn check_points(c: &RdCurve) -> Result<()> {
    if c.points.len() < 4 {
        return Err(Error::data(format!(
            "curve '{}' has {} points; at least 4 are needed for the cubic fit",
            c.label,
            c.points.len()
        )));
    }
    Ok(())
}

/// (rate delta in percent, quality delta in dB) of `test` against `anchor`.
/// Negative rate deltas mean the test curve spends fewer bits at equal
/// quality.
pub fn bd_metrics(anchor: &RdCurve, test: &RdCurve) -> Result<(f64, f64)> {
    check_points(anchor)?;
    check_points(test)?;
    // rate delta: integrate log-rate as a function of quality
    let (qlo, qhi) = overlap(&anchor.qualities(), &test.qualities())?;
    let c = 0.5 * (qlo + qhi);
    let s = 0.5 * (qhi - qlo);
    let fa = fit_cubic(&anchor.qualities(), &anchor.log_rates(), c, s);
    let ft = fit_cubic(&test.qualities(), &test.log_rates(), c, s);
    let avg_log_diff = mean_over_unit(&ft) - mean_over_unit(&fa);
    let bd_rate = (10.0f64.powf(avg_log_diff) - 1.0) * 100.0;
    // quality delta: integrate quality as a function of log-rate
    let (rlo, rhi) = overlap(&anchor.log_rates(), &test.log_rates())?;
    let c2 = 0.5 * (rlo + rhi);
    let s2 = 0.5 * (rhi - rlo);
    let ga = fit_cubic(&anchor.log_rates(), &anchor.qualities(), c2, s2);
    let gt = fit_cubic(&test.log_rates(), &test.qualities(), c2, s2);
    let bd_quality = mean_over_unit(&gt) - mean_over_unit(&ga);
    Ok((bd_rate, bd_quality))
}

/// One row of the shipped reference results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBd {
    pub method: String,
    pub dataset: String,
    pub bd_psnr_db: f64,
    pub bd_rate_pct: f64,
}

impl ReferenceBd {
    /// Prints the row the way the results table does.
    pub fn display_values(&self) -> String {
        format!("{:.2} dB / {:.2}%", self.bd_psnr_db, self.bd_rate_pct)
    }
}

const REFERENCE_CSV: &str = include_str!("../../fixtures/bd_reference.csv");

/// Parses the shipped reference table of published BD results.
pub fn load_reference_bd() -> Result<Vec<ReferenceBd>> {
    parse_reference_bd(REFERENCE_CSV)
}

pub fn parse_reference_bd(text: &str) -> Result<Vec<ReferenceBd>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::data(format!("bad reference row: {e}")))?;
        if rec.len() != 4 {
            return Err(Error::data("reference table needs 4 columns"));
        }
        rows.push(ReferenceBd {
            method: rec[0].to_string(),
            dataset: rec[1].to_string(),
            bd_psnr_db: rec[2]
                .parse()
                .map_err(|_| Error::data(format!("bad BD quality '{}'", &rec[2])))?,
            bd_rate_pct: rec[3]
                .parse()
                .map_err(|_| Error::data(format!("bad BD rate '{}'", &rec[3])))?,
        });
    }
    if rows.is_empty() {
        return Err(Error::data("reference table is empty"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> RdCurve {
        RdCurve::new(
            "anchor",
            vec![
                RdPoint { label: "a".to_string(), bpp: 0.25, quality: 30.0 },
                RdPoint { label: "a".to_string(), bpp: 0.50, quality: 33.0 },
                RdPoint { label: "a".to_string(), bpp: 1.00, quality: 36.0 },
                RdPoint { label: "a".to_string(), bpp: 2.00, quality: 39.5 },
                RdPoint { label: "a".to_string(), bpp: 4.00, quality: 42.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn self_comparison_is_exactly_zero() {
        let a = anchor();
        let (rate, quality) = bd_metrics(&a, &a).unwrap();
        assert_eq!(rate, 0.0);
        assert_eq!(quality, 0.0);
    }

    #[test]
    fn half_rate_curve_saves_half_the_bits() {
        let a = anchor();
        let halved = RdCurve::new(
            "test",
            a.points
                .iter()
                .map(|p| RdPoint {
                    label: "t".to_string(),
                    bpp: p.bpp / 2.0,
                    quality: p.quality,
                })
                .collect(),
        )
        .unwrap();
        let (rate, _) = bd_metrics(&a, &halved).unwrap();
        assert!((rate - -50.0).abs() < 0.1, "{rate}");
    }

    #[test]
    fn one_db_offset_reports_one_db() {
        let a = anchor();
        let better = RdCurve::new(
            "test",
            a.points
                .iter()
                .map(|p| RdPoint {
                    label: "t".to_string(),
                    bpp: p.bpp,
                    quality: p.quality + 1.0,
                })
                .collect(),
        )
        .unwrap();
        let (_, q) = bd_metrics(&a, &better).unwrap();
        assert!((q - 1.0).abs() < 0.01, "{q}");
    }

    #[test]
    fn antisymmetry_of_quality_delta() {
        let a = anchor();
        let mut shifted = anchor();
        for p in &mut shifted.points {
            p.quality += 0.8;
            p.bpp *= 1.1;
        }
        let shifted = RdCurve::new("s", shifted.points).unwrap();
        let (_, q1) = bd_metrics(&a, &shifted).unwrap();
        let (_, q2) = bd_metrics(&shifted, &a).unwrap();
        assert!((q1 + q2).abs() < 1e-6, "{q1} vs {q2}");
    }

    #[test]
    fn too_few_points_is_refused() {
        let a = anchor();
        let small = RdCurve::new(
            "s",
            a.points[..3]
                .iter()
                .map(|p| RdPoint {
                    label: "s".to_string(),
                    bpp: p.bpp,
                    quality: p.quality,
                })
                .collect(),
        )
        .unwrap();
        assert!(bd_metrics(&a, &small).is_err());
    }

    #[test]
    fn disjoint_quality_ranges_are_refused() {
        let a = anchor();
        let far = RdCurve::new(
            "far",
            a.points
                .iter()
                .map(|p| RdPoint {
                    label: "f".to_string(),
                    bpp: p.bpp,
                    quality: p.quality + 100.0,
                })
                .collect(),
        )
        .unwrap();
        assert!(bd_metrics(&a, &far).is_err());
    }

    #[test]
    fn reference_table_parses_and_reprints() {
        let rows = load_reference_bd().unwrap();
        let cheng = rows
            .iter()
            .find(|r| r.method == "Cheng et al." && r.dataset == "Kodak")
            .expect("reference row present");
        assert_eq!(cheng.display_values(), "0.78 dB / -16.43%");
    }

    #[test]
    fn nonincreasing_bpp_is_rejected() {
        let pts = vec![
            RdPoint { label: "x".to_string(), bpp: 1.0, quality: 30.0 },
            RdPoint { label: "x".to_string(), bpp: 1.0, quality: 31.0 },
        ];
        assert!(RdCurve::new("x", pts).is_err());
    }
}
