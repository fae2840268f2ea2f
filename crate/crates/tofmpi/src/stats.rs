//! Depth-corpus statistics and the three histogram comparison metrics
//! (chi-squared, Jensen-Shannon distance, Pearson correlation) used to
//! check that two depth corpora are statistically similar.

use crate::sensor::DepthMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("empty corpus: no valid depth pixels")]
    EmptyCorpus,
    #[error("histogram binning mismatch: {a} vs {b} bins")]
    BinningMismatch { a: usize, b: usize },
    #[error("undefined correlation: at least one histogram is constant")]
    ConstantInput,
}

/// Upper bound of the Jensen-Shannon distance under natural logs.
pub fn js_max() -> f64 {
    std::f64::consts::LN_2.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// len = counts.len() + 1, strictly increasing.
    pub bin_edges: Vec<f64>,
    pub counts: Vec<f64>,
    pub normalized: bool,
}

impl Histogram {
    pub fn from_edges(bin_edges: Vec<f64>) -> Self {
        let n = bin_edges.len().saturating_sub(1);
        Histogram { bin_edges, counts: vec![0.0; n], normalized: false }
    }

    pub fn linear(lo: f64, hi: f64, bins: usize) -> Self {
        let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Histogram::from_edges(edges)
    }

    /// Log-spaced edges over (lo, hi], lo > 0.
    pub fn log_spaced(lo: f64, hi: f64, bins: usize) -> Self {
        let (l0, l1) = (lo.ln(), hi.ln());
        let edges = (0..=bins).map(|i| (l0 + (l1 - l0) * i as f64 / bins as f64).exp()).collect();
        Histogram::from_edges(edges)
    }

    pub fn add(&mut self, v: f64) {
        let n = self.counts.len();
        if n == 0 || v < self.bin_edges[0] || v > self.bin_edges[n] {
            return;
        }
        // Binary search for the containing bin; right edge inclusive.
        let mut idx = match self.bin_edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
            Ok(i) => i,
            Err(i) => i.saturating_sub(1),
        };
        if idx >= n {
            idx = n - 1;
        }
        self.counts[idx] += 1.0;
    }

    pub fn normalize(&mut self) {
        let total: f64 = self.counts.iter().sum();
        if total > 0.0 {
            for c in self.counts.iter_mut() {
                *c /= total;
            }
        }
        self.normalized = true;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Dense 2-D histogram over a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2d {
    pub x_edges: Vec<f64>,
    pub y_edges: Vec<f64>,
    /// Row-major [y][x].
    pub counts: Vec<f64>,
    pub normalized: bool,
}

impl Histogram2d {
    pub fn linear(xlo: f64, xhi: f64, xbins: usize, ylo: f64, yhi: f64, ybins: usize) -> Self {
        let x_edges = (0..=xbins).map(|i| xlo + (xhi - xlo) * i as f64 / xbins as f64).collect();
        let y_edges = (0..=ybins).map(|i| ylo + (yhi - ylo) * i as f64 / ybins as f64).collect();
        Histogram2d { x_edges, y_edges, counts: vec![0.0; xbins * ybins], normalized: false }
    }

    pub fn xbins(&self) -> usize {
        self.x_edges.len() - 1
    }

    pub fn ybins(&self) -> usize {
        self.y_edges.len() - 1
    }

    pub fn add(&mut self, x: f64, y: f64) {
        let (xb, yb) = (self.xbins(), self.ybins());
        let xi = bin_index(&self.x_edges, x);
        let yi = bin_index(&self.y_edges, y);
        if let (Some(xi), Some(yi)) = (xi, yi) {
            if xi < xb && yi < yb {
                self.counts[yi * xb + xi] += 1.0;
            }
        }
    }

    pub fn normalize(&mut self) {
        let total: f64 = self.counts.iter().sum();
        if total > 0.0 {
            for c in self.counts.iter_mut() {
                *c /= total;
            }
        }
        self.normalized = true;
    }
}

fn bin_index(edges: &[f64], v: f64) -> Option<usize> {
    let n = edges.len() - 1;
    if v < edges[0] || v > edges[n] {
        return None;
    }
    let idx = match edges.binary_search_by(|e| e.partial_cmp(&v).unwrap()) {
        Ok(i) => i,
        Err(i) => i.saturating_sub(1),
    };
    Some(idx.min(n - 1))
}

/// Binning configuration for [`compute_stats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    pub depth_bins: usize,
    /// Upper depth edge, meters; depth uses log spacing over (min, max].
    pub depth_max: f64,
    pub gradient_bins: usize,
    /// Gradient histograms span [-gradient_range, gradient_range] meters.
    pub gradient_range: f64,
    pub cooccurrence_bins: usize,
    pub haar_bins: usize,
}

impl Default for BinSpec {
    fn default() -> Self {
        BinSpec {
            depth_bins: 64,
            depth_max: 7.494811,
            gradient_bins: 129,
            gradient_range: 1.0,
            cooccurrence_bins: 64,
            haar_bins: 48,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatsReport {
    pub depth_hist: Histogram,
    pub dx_hist: Histogram,
    pub dy_hist: Histogram,
    pub kurtosis_x: f64,
    pub kurtosis_y: f64,
    /// Pixel pairs at horizontal separation 1, axes u = a+b, v = a-b.
    pub cooccurrence: Histogram2d,
    /// Joint log-magnitude histograms of one-level Haar coefficients.
    pub haar_joint_hv: Histogram2d,
    pub haar_joint_hd: Histogram2d,
}

/// One-level orthonormal 2x2 Haar coefficients (H, V, D) of an image;
/// odd trailing rows/columns are cropped.
pub fn haar_coefficients(values: &[f32], width: usize, height: usize) -> Vec<(f64, f64, f64)> {
    let mut out = Vec::new();
    for by in 0..height / 2 {
        for bx in 0..width / 2 {
            let i = 2 * by * width + 2 * bx;
            let a = values[i] as f64;
            let b = values[i + 1] as f64;
            let c = values[i + width] as f64;
            let d = values[i + width + 1] as f64;
            if a < 0.0 || b < 0.0 || c < 0.0 || d < 0.0 {
                continue; // block touches a no-hit pixel
            }
            let h = (a - b + c - d) / 2.0;
            let v = (a + b - c - d) / 2.0;
            let dd = (a - b - c + d) / 2.0;
            out.push((h, v, dd));
        }
    }
    out
}

/// Aggregates single-pixel, derivative, bivariate and Haar wavelet
/// statistics over a depth corpus. No-hit pixels are excluded.
pub fn compute_stats<'a, I>(corpus: I, bins: &BinSpec) -> Result<StatsReport, StatsError>
where
    I: IntoIterator<Item = &'a DepthMap>,
{
    let mut depth_hist = Histogram::log_spaced(0.01, bins.depth_max, bins.depth_bins);
    let mut dx_hist = Histogram::linear(-bins.gradient_range, bins.gradient_range, bins.gradient_bins);
    let mut dy_hist = dx_hist.clone();
    let s = 2.0 * bins.depth_max;
    let mut cooccurrence =
        Histogram2d::linear(0.0, s, bins.cooccurrence_bins, -bins.depth_max, bins.depth_max, bins.cooccurrence_bins);
    // Haar magnitudes in log10 domain; 1e-6 m floor.
    let hb = bins.haar_bins;
    let mut haar_joint_hv = Histogram2d::linear(-6.0, 1.0, hb, -6.0, 1.0, hb);
    let mut haar_joint_hd = haar_joint_hv.clone();

    let mut valid_pixels = 0usize;
    let mut mx = Moments::default();
    let mut my = Moments::default();

    for map in corpus {
        let (w, h) = (map.width, map.height);
        for y in 0..h {
            for x in 0..w {
                let v = map.values[y * w + x];
                if v < 0.0 {
                    continue;
                }
                valid_pixels += 1;
                depth_hist.add(v as f64);
                if x + 1 < w {
                    let r = map.values[y * w + x + 1];
                    if r >= 0.0 {
                        let d = (r - v) as f64;
                        dx_hist.add(d);
                        mx.push(d);
                        cooccurrence.add((v + r) as f64, (v - r) as f64);
                    }
                }
                if y + 1 < h {
                    let b = map.values[(y + 1) * w + x];
                    if b >= 0.0 {
                        let d = (b - v) as f64;
                        dy_hist.add(d);
                        my.push(d);
                    }
                }
            }
        }
        for (hc, vc, dc) in haar_coefficients(&map.values, w, h) {
            let lg = |m: f64| (m.abs().max(1e-6)).log10();
            haar_joint_hv.add(lg(hc), lg(vc));
            haar_joint_hd.add(lg(hc), lg(dc));
        }
    }
    if valid_pixels == 0 {
        return Err(StatsError::EmptyCorpus);
    }
    depth_hist.normalize();
    dx_hist.normalize();
    dy_hist.normalize();
    cooccurrence.normalize();
    haar_joint_hv.normalize();
    haar_joint_hd.normalize();
    Ok(StatsReport {
        depth_hist,
        dx_hist,
        dy_hist,
        kurtosis_x: mx.kurtosis(),
        kurtosis_y: my.kurtosis(),
        cooccurrence,
        haar_joint_hv,
        haar_joint_hd,
    })
}

#[derive(Debug, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum2: f64,
    sum3: f64,
    sum4: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        self.sum += v;
        self.sum2 += v * v;
        self.sum3 += v * v * v;
        self.sum4 += v * v * v * v;
    }

    /// Standardized fourth moment (3.0 for a Gaussian).
    fn kurtosis(&self) -> f64 {
        if self.n < 2.0 {
            return f64::NAN;
        }
        let mean = self.sum / self.n;
        let m2 = self.sum2 / self.n - mean * mean;
        let m4 = self.sum4 / self.n - 4.0 * mean * self.sum3 / self.n
            + 6.0 * mean * mean * self.sum2 / self.n
            - 3.0 * mean.powi(4);
        if m2 <= 0.0 {
            f64::NAN
        } else {
            m4 / (m2 * m2)
        }
    }
}

fn check_binning(p: &Histogram, q: &Histogram) -> Result<(), StatsError> {
    if p.counts.len() != q.counts.len() {
        return Err(StatsError::BinningMismatch { a: p.counts.len(), b: q.counts.len() });
    }
    Ok(())
}

/// Symmetric chi-squared distance: sum (p - q)^2 / (p + q) over bins with
/// p + q > 0.
pub fn chi_squared(p: &Histogram, q: &Histogram) -> Result<f64, StatsError> {
    check_binning(p, q)?;
    let mut acc = 0.0;
    for (a, b) in p.counts.iter().zip(&q.counts) {
        let s = a + b;
        if s > 0.0 {
            acc += (a - b) * (a - b) / s;
        }
    }
    Ok(acc)
}

/// Jensen-Shannon distance with natural logs, in [0, sqrt(ln 2)].
pub fn jensen_shannon_distance(p: &Histogram, q: &Histogram) -> Result<f64, StatsError> {
    check_binning(p, q)?;
    let mut div = 0.0;
    for (a, b) in p.counts.iter().zip(&q.counts) {
        let m = (a + b) / 2.0;
        if *a > 0.0 {
            div += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            div += 0.5 * b * (b / m).ln();
        }
    }
    Ok(div.max(0.0).sqrt())
}

/// Sample Pearson correlation of bin counts.
pub fn pearson(p: &Histogram, q: &Histogram) -> Result<f64, StatsError> {
    check_binning(p, q)?;
    let n = p.counts.len() as f64;
    if n < 2.0 {
        return Err(StatsError::ConstantInput);
    }
    let mp = p.counts.iter().sum::<f64>() / n;
    let mq = q.counts.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vq = 0.0;
    for (a, b) in p.counts.iter().zip(&q.counts) {
        cov += (a - mp) * (b - mq);
        vp += (a - mp) * (a - mp);
        vq += (b - mq) * (b - mq);
    }
    if vp == 0.0 || vq == 0.0 {
        return Err(StatsError::ConstantInput);
    }
    Ok(cov / (vp.sqrt() * vq.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricTriplet {
    pub chi_squared: f64,
    pub jensen_shannon: f64,
    pub pearson: f64,
}

pub fn compare(p: &Histogram, q: &Histogram) -> Result<MetricTriplet, StatsError> {
    Ok(MetricTriplet {
        chi_squared: chi_squared(p, q)?,
        jensen_shannon: jensen_shannon_distance(p, q)?,
        pearson: pearson(p, q)?,
    })
}

/// Writes a histogram as a two-column CSV (bin_center, value).
pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_center,value\n");
    for (i, c) in h.counts.iter().enumerate() {
        let center = (h.bin_edges[i] + h.bin_edges[i + 1]) / 2.0;
        out.push_str(&format!("{center},{c}\n"));
    }
    out
}

/// Writes a 2-D histogram as a dense CSV grid, one row per y bin.
pub fn histogram2d_csv(h: &Histogram2d) -> String {
    let mut out = String::new();
    let xb = h.xbins();
    for y in 0..h.ybins() {
        let row: Vec<String> = (0..xb).map(|x| h.counts[y * xb + x].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
