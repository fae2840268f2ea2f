//! MPI error quantification: absolute/relative error distributions,
//! depth-conditioned error, percentiles, R-squared and per-image MAE.

use crate::sensor::DepthMap;
use crate::stats::{Histogram, Histogram2d};
use serde::{Deserialize, Serialize};

/// Relative error is only computed where the measured depth exceeds this,
/// to keep the division well-behaved.
pub const MIN_MEASURED_DEPTH: f64 = 0.05;

/// Mean relative MPI error reported for real diffuse scenes in the
/// literature; recorded alongside measurements for context, never asserted.
pub const REFERENCE_MEAN_REL_ERROR: f64 = 0.12;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("no valid pixels: every pixel is a sentinel in at least one map")]
    NoValidPixels,
    #[error("paired maps differ in shape: {a_w}x{a_h} vs {b_w}x{b_h}")]
    ShapeMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("measured/reference corpora differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Absolute error histogram, meters.
    pub abs_error_hist: Histogram,
    /// Relative error histogram, error / measured ToF depth.
    pub rel_error_hist: Histogram,
    pub mean_abs_error: f64,
    pub mean_rel_error: f64,
    /// 25/50/75 percentiles of per-pixel absolute error, meters.
    pub percentiles: [f64; 3],
    /// Per-image coefficient of determination against the reference.
    pub r_squared: Vec<f64>,
    /// Per-image mean absolute error, meters.
    pub per_image_mae: Vec<f64>,
    /// (measured ToF depth, relative error) density.
    pub bivariate: Histogram2d,
}

impl ErrorReport {
    pub fn per_image_mae_variance(&self) -> f64 {
        let n = self.per_image_mae.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.per_image_mae.iter().sum::<f64>() / n;
        self.per_image_mae.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0)
    }
}

fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Compares paired measured/reference depth maps.
///
/// Absolute error is |measured - reference|; relative error divides by the
/// measured ToF depth. Sentinel pixels in either map are excluded.
pub fn mpi_error_report(
    measured: &[DepthMap],
    reference: &[DepthMap],
    depth_max: f64,
) -> Result<ErrorReport, AnalysisError> {
    if measured.len() != reference.len() {
        return Err(AnalysisError::LengthMismatch { a: measured.len(), b: reference.len() });
    }
    let mut abs_error_hist = Histogram::linear(0.0, depth_max, 128);
    let mut rel_error_hist = Histogram::linear(0.0, 1.0, 128);
    let mut bivariate = Histogram2d::linear(0.0, depth_max, 64, 0.0, 1.0, 64);
    let mut abs_all: Vec<f64> = Vec::new();
    let mut rel_sum = 0.0;
    let mut rel_n = 0usize;
    let mut r_squared = Vec::new();
    let mut per_image_mae = Vec::new();

    for (m, r) in measured.iter().zip(reference) {
        if m.width != r.width || m.height != r.height {
            return Err(AnalysisError::ShapeMismatch {
                a_w: m.width,
                a_h: m.height,
                b_w: r.width,
                b_h: r.height,
            });
        }
        let mut img_abs = Vec::new();
        let mut ref_vals = Vec::new();
        let mut res_sq = 0.0;
        for (mv, rv) in m.values.iter().zip(&r.values) {
            if *mv < 0.0 || *rv < 0.0 {
                continue;
            }
            let (mv, rv) = (*mv as f64, *rv as f64);
            let abs = (mv - rv).abs();
            img_abs.push(abs);
            abs_error_hist.add(abs);
            abs_all.push(abs);
            ref_vals.push(rv);
            res_sq += (mv - rv) * (mv - rv);
            if mv > MIN_MEASURED_DEPTH {
                let rel = abs / mv;
                rel_error_hist.add(rel);
                bivariate.add(mv, rel);
                rel_sum += rel;
                rel_n += 1;
            }
        }
        if img_abs.is_empty() {
            continue;
        }
        let mean_ref = ref_vals.iter().sum::<f64>() / ref_vals.len() as f64;
        let ss_tot: f64 = ref_vals.iter().map(|v| (v - mean_ref) * (v - mean_ref)).sum();
        // Constant reference: R^2 is 1 for a perfect fit, else undefined -> -inf avoided.
        let r2 = if ss_tot > 0.0 {
            1.0 - res_sq / ss_tot
        } else if res_sq == 0.0 {
            1.0
        } else {
            f64::NEG_INFINITY
        };
        r_squared.push(r2);
        per_image_mae.push(img_abs.iter().sum::<f64>() / img_abs.len() as f64);
    }
    if abs_all.is_empty() {
        return Err(AnalysisError::NoValidPixels);
    }
    abs_all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let percentiles = [
        percentile_sorted(&abs_all, 0.25),
        percentile_sorted(&abs_all, 0.50),
        percentile_sorted(&abs_all, 0.75),
    ];
    abs_error_hist.normalize();
    rel_error_hist.normalize();
    bivariate.normalize();
    Ok(ErrorReport {
        abs_error_hist,
        rel_error_hist,
        mean_abs_error: abs_all.iter().sum::<f64>() / abs_all.len() as f64,
        mean_rel_error: if rel_n > 0 { rel_sum / rel_n as f64 } else { 0.0 },
        percentiles,
        r_squared,
        per_image_mae,
        bivariate,
    })
}

/// CSV rows with the three absolute-error percentiles, one row per labeled
/// report.
pub fn percentile_table(rows: &[(String, &ErrorReport)]) -> String {
    let mut out = String::from("method,p25_m,p50_m,p75_m,mean_abs_error_m,mean_rel_error\n");
    for (label, report) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            label,
            report.percentiles[0],
            report.percentiles[1],
            report.percentiles[2],
            report.mean_abs_error,
            report.mean_rel_error
        ));
    }
    out
}
