//! Continuous-wave ToF measurement model and depth recovery.
//!
//! A single-frequency ToF camera takes four correlation measurements
//! `c_i = A * cos(phi + theta_i)` with phase offsets `theta_i` of
//! 0, pi/2, pi and 3*pi/2. From those it recovers phase
//! `phi = atan2(c4 - c2, c1 - c3)` and depth `d = c * phi / (4 * pi * f)`.
//! A path of round-trip optical length `l` contributes phase
//! `phi = 2 * pi * f * l / c`, so a direct return at distance `d` yields
//! `l = 2 * d` and the formulas above invert exactly.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Amplitudes below this (relative to emitter_power = 1) make the phase
/// arctangent numerically meaningless; such pixels become no-hit.
pub const AMPLITUDE_FLOOR: f64 = 1e-9;

/// No-hit sentinel value in depth maps, meters.
pub const NO_HIT: f32 = -1.0;

/// The four correlation phase offsets, radians.
pub const PHASE_OFFSETS: [f64; 4] = [
    0.0,
    std::f64::consts::FRAC_PI_2,
    std::f64::consts::PI,
    3.0 * std::f64::consts::FRAC_PI_2,
];

#[derive(Debug, thiserror::Error)]
pub enum SensorError {
    #[error("dimension mismatch: correlations are {got_w}x{got_h}, camera expects {want_w}x{want_h}")]
    DimensionMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("correlation planes have mismatched sizes")]
    RaggedCorrelations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraConfig {
    /// Modulation frequency, Hz.
    pub modulation_frequency: f64,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view, radians.
    pub horizontal_fov: f64,
    /// Dimensionless emitter scale.
    pub emitter_power: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        CameraConfig {
            modulation_frequency: 20e6,
            width: 64,
            height: 64,
            horizontal_fov: 60f64.to_radians(),
            emitter_power: 1.0,
        }
    }
}

impl CameraConfig {
    /// c / (2 f): the depth at which phase wraps. 7.4948 m at 20 MHz.
    pub fn unambiguous_range(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.modulation_frequency)
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// The four phase-shifted correlation images, arbitrary radiometric units.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationSet {
    pub width: usize,
    pub height: usize,
    /// Planes in measurement order c1, c2, c3, c4; each width*height, row-major.
    pub planes: [Vec<f64>; 4],
}

impl CorrelationSet {
    pub fn zeros(width: usize, height: usize) -> Self {
        let n = width * height;
        CorrelationSet { width, height, planes: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]] }
    }

    /// Per-pixel complex phasor `A * exp(j phi)` recovered from the four
    /// correlations: `2 Re = c1 - c3`, `2 Im = c4 - c2`.
    pub fn to_phasor(&self) -> Vec<Complex64> {
        let [c1, c2, c3, c4] = &self.planes;
        (0..self.width * self.height)
            .map(|i| Complex64::new((c1[i] - c3[i]) * 0.5, (c4[i] - c2[i]) * 0.5))
            .collect()
    }
}

/// Per-pixel range image in meters. `NO_HIT` (-1.0) marks pixels with no
/// usable return.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, v: f32) -> Self {
        DepthMap { width, height, values: vec![v; width * height] }
    }

    pub fn valid_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.values.iter().copied().filter(|&v| v >= 0.0)
    }
}

/// Depth recovery from the four correlations (phase arctangent).
pub fn depth_from_correlations(corr: &CorrelationSet, cam: &CameraConfig) -> Result<DepthMap, SensorError> {
    if corr.width != cam.width || corr.height != cam.height {
        return Err(SensorError::DimensionMismatch {
            got_w: corr.width,
            got_h: corr.height,
            want_w: cam.width,
            want_h: cam.height,
        });
    }
    let amp = amplitude_from_correlations(corr);
    let [c1, c2, c3, c4] = &corr.planes;
    let scale = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * cam.modulation_frequency);
    let floor = AMPLITUDE_FLOOR * cam.emitter_power;
    let values = (0..corr.width * corr.height)
        .map(|i| {
            if amp[i] < floor {
                return NO_HIT;
            }
            let mut phi = (c4[i] - c2[i]).atan2(c1[i] - c3[i]);
            if phi < 0.0 {
                phi += 2.0 * std::f64::consts::PI;
            }
            (scale * phi) as f32
        })
        .collect();
    Ok(DepthMap { width: corr.width, height: corr.height, values })
}

/// Per-pixel amplitude `A = sqrt((c4-c2)^2 + (c1-c3)^2) / 2`.
pub fn amplitude_from_correlations(corr: &CorrelationSet) -> Vec<f64> {
    let [c1, c2, c3, c4] = &corr.planes;
    (0..corr.width * corr.height)
        .map(|i| 0.5 * ((c4[i] - c2[i]).powi(2) + (c1[i] - c3[i]).powi(2)).sqrt())
        .collect()
}

/// Projects a per-pixel phasor image onto the four correlation buckets:
/// `c_i = |S| * cos(arg S + theta_i)`.
pub fn correlations_from_phasor(phasor: &[Complex64], width: usize, height: usize) -> CorrelationSet {
    assert_eq!(phasor.len(), width * height, "phasor image size mismatch");
    let mut out = CorrelationSet::zeros(width, height);
    for (i, s) in phasor.iter().enumerate() {
        let a = s.norm();
        let phi = s.arg();
        for (k, theta) in PHASE_OFFSETS.iter().enumerate() {
            out.planes[k][i] = a * (phi + theta).cos();
        }
    }
    out
}

/// Phase accumulated by a path of round-trip optical length `len` meters.
pub fn path_phase(len: f64, frequency: f64) -> f64 {
    2.0 * std::f64::consts::PI * frequency * len / SPEED_OF_LIGHT
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cam() -> CameraConfig {
        CameraConfig { width: 1, height: 1, ..Default::default() }
    }

    fn corr1(c: [f64; 4]) -> CorrelationSet {
        CorrelationSet { width: 1, height: 1, planes: [vec![c[0]], vec![c[1]], vec![c[2]], vec![c[3]]] }
    }

    #[test]
    fn unambiguous_range_at_20mhz() {
        assert_relative_eq!(cam().unambiguous_range(), 7.494811, epsilon = 1e-6);
    }

    #[test]
    fn half_range_return() {
        // phi = pi -> c = (-A, 0, A, 0) -> depth is half the unambiguous range.
        let cam = cam();
        let d = depth_from_correlations(&corr1([-1.0, 0.0, 1.0, 0.0]), &cam).unwrap();
        assert_relative_eq!(d.values[0] as f64, cam.unambiguous_range() / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn zero_phase_gives_zero_depth() {
        let d = depth_from_correlations(&corr1([1.0, 0.0, -1.0, 0.0]), &cam()).unwrap();
        assert_eq!(d.values[0], 0.0);
    }

    #[test]
    fn near_wrap_approaches_max_range() {
        let cam = cam();
        let phi = 2.0 * std::f64::consts::PI - 1e-9;
        let s = [Complex64::from_polar(1.0, phi)];
        let corr = correlations_from_phasor(&s, 1, 1);
        let d = depth_from_correlations(&corr, &cam).unwrap();
        assert_relative_eq!(d.values[0] as f64, 7.4948, epsilon = 1e-3);
    }

    #[test]
    fn amplitude_unit_phasor() {
        let a = amplitude_from_correlations(&corr1([-1.0, 0.0, 1.0, 0.0]));
        assert_relative_eq!(a[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn amplitude_all_zero() {
        let a = amplitude_from_correlations(&corr1([0.0; 4]));
        assert_eq!(a[0], 0.0);
    }

    #[test]
    fn amplitude_matches_two_return_phasor_sum() {
        // Two returns summed in the complex domain, then projected: the
        // recovered amplitude must equal the modulus of the summed phasor.
        let s = Complex64::from_polar(1.0, 0.7) + Complex64::from_polar(0.3, 2.1);
        let corr = correlations_from_phasor(&[s], 1, 1);
        let a = amplitude_from_correlations(&corr);
        assert_relative_eq!(a[0], s.norm(), epsilon = 1e-12);
    }

    #[test]
    fn phasor_projection_trivial_cases() {
        let corr = correlations_from_phasor(&[Complex64::new(1.0, 0.0)], 1, 1);
        let got: Vec<f64> = corr.planes.iter().map(|p| p[0]).collect();
        for (g, w) in got.iter().zip([1.0, 0.0, -1.0, 0.0]) {
            assert_relative_eq!(*g, w, epsilon = 1e-12);
        }
        let corr = correlations_from_phasor(&[Complex64::new(0.0, 0.0)], 1, 1);
        assert!(corr.planes.iter().all(|p| p[0] == 0.0));
        // S = exp(j pi/2) -> cos(pi/2 + theta_i) = (0, -1, 0, 1)
        let corr = correlations_from_phasor(&[Complex64::from_polar(1.0, std::f64::consts::FRAC_PI_2)], 1, 1);
        let got: Vec<f64> = corr.planes.iter().map(|p| p[0]).collect();
        for (g, w) in got.iter().zip([0.0, -1.0, 0.0, 1.0]) {
            assert_relative_eq!(*g, w, epsilon = 1e-12);
        }
    }

    #[test]
    fn low_amplitude_yields_sentinel() {
        let d = depth_from_correlations(&corr1([1e-12, 0.0, -1e-12, 0.0]), &cam()).unwrap();
        assert_eq!(d.values[0], NO_HIT);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let cam = CameraConfig { width: 2, height: 2, ..Default::default() };
        let err = depth_from_correlations(&corr1([1.0, 0.0, -1.0, 0.0]), &cam).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1x1") && msg.contains("2x2"));
    }

    #[test]
    fn amplitude_scaling_leaves_depth_bit_identical() {
        let base = corr1([0.3, -0.8, 0.1, 0.9]);
        let mut scaled = base.clone();
        for p in scaled.planes.iter_mut() {
            for v in p.iter_mut() {
                *v *= 17.5_f64;
            }
        }
        let cam = cam();
        let d0 = depth_from_correlations(&base, &cam).unwrap();
        let d1 = depth_from_correlations(&scaled, &cam).unwrap();
        assert_eq!(d0.values, d1.values);
    }
}
