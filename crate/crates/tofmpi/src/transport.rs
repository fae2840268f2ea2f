//! Phasor-domain multi-bounce light transport over diffuse patch scenes.
//!
//! At a single modulation frequency, light transport is linear over complex
//! phasors, so one complex patch-to-patch operator carries all four
//! phase-shifted correlation measurements at once. The per-bounce transfer
//! from patch v to patch u is
//!
//! `T(u,v) = rho_u * cos(t_uv) * cos(t_vu) * A_v / (pi r^2 + A_v) * V(u,v) * exp(j 2 pi f r / c)`
//!
//! with binary visibility V by exact ray-quad testing and `T(u,u) = 0`.
//! The area term in the denominator is the point-to-disk form factor; it
//! agrees with the bare 1/(pi r^2) kernel when r^2 >> A and stays bounded
//! for near-contact patch pairs.
//! The camera and emitter are co-located at the pinhole; the sensor gather
//! from a patch adds only the return-leg phase (pinhole radiance is
//! distance-invariant), which makes the single-bounce sensor phasor equal
//! the closed-form direct term exactly.

use crate::geom::{closest_hit, segment_visible, Quad, Vec3};
use crate::scenegen::SceneDescription;
use crate::sensor::{
    correlations_from_phasor, path_phase, CameraConfig, CorrelationSet, DepthMap, NO_HIT,
};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use std::sync::Arc;

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("empty frame: no camera-visible geometry")]
    EmptyFrame,
    #[error("transport matrix mismatch: matrix is {t_w}x{t_h} at {t_f} Hz, input is {i_w}x{i_h} at {i_f} Hz")]
    Mismatch { t_w: usize, t_h: usize, t_f: f64, i_w: usize, i_h: usize, i_f: f64 },
    #[error("singular system in infinite-bounce solve; scene violates the spectral-radius contract")]
    SingularSolve,
    #[error("unstable transport: |T| spectral radius estimate {rho} >= 1")]
    UnstableTransport { rho: f64 },
}

/// One discretized scene patch. `owner_pixel` is the pixel whose view ray
/// produced it; `None` marks off-frustum geometry (not generated by default).
#[derive(Debug, Clone, Copy)]
pub struct Patch {
    pub center: Vec3,
    /// Unit normal, oriented toward the camera.
    pub normal: Vec3,
    /// Patch area, m^2.
    pub area: f64,
    pub albedo: f64,
    pub owner_pixel: Option<usize>,
    /// Camera-to-patch distance along the view ray, meters.
    pub cam_distance: f64,
    /// Cosine between the patch normal and the direction back to the camera.
    pub cos_cam: f64,
}

#[derive(Debug, Clone)]
pub struct PatchGrid {
    pub patches: Vec<Patch>,
    pub width: usize,
    pub height: usize,
    /// Per-pixel patch index; `None` where the view ray misses all geometry.
    pub pixel_patch: Vec<Option<usize>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Albedo-independent part of the transfer operator:
/// `G(u,v) = cos(t_uv) cos(t_vu) / (pi r^2) * A_v * V(u,v) * exp(j 2 pi f r / c)`.
///
/// Albedo variants of the same geometry reuse one kernel.
#[derive(Debug, Clone)]
pub struct GeometryKernel {
    pub n: usize,
    pub frequency: f64,
    /// Row-major n*n, diagonal zero.
    pub entries: Vec<Complex64>,
}

/// The complex per-bounce patch-to-patch transfer at the modulation
/// frequency, `T(u,v) = rho_u * G(u,v)`.
#[derive(Debug, Clone)]
pub struct TransportMatrix {
    pub frequency: f64,
    pub width: usize,
    pub height: usize,
    kernel: Arc<GeometryKernel>,
    /// Receiving-patch albedo per row.
    row_albedo: Vec<f64>,
    /// Patch index -> owner pixel.
    pub patch_pixel: Vec<usize>,
    /// Unit-modulus return-leg phase per patch.
    gather: Vec<Complex64>,
}

impl TransportMatrix {
    pub fn n(&self) -> usize {
        self.kernel.n
    }

    pub fn entry(&self, u: usize, v: usize) -> Complex64 {
        self.kernel.entries[u * self.kernel.n + v] * self.row_albedo[u]
    }

    /// y = T x
    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        let n = self.kernel.n;
        (0..n)
            .map(|u| {
                let row = &self.kernel.entries[u * n..(u + 1) * n];
                let mut acc = Complex64::new(0.0, 0.0);
                for (g, xv) in row.iter().zip(x) {
                    acc += g * xv;
                }
                acc * self.row_albedo[u]
            })
            .collect()
    }

    /// y = |T| x for non-negative x (power-iteration helper).
    fn abs_matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.kernel.n;
        (0..n)
            .map(|u| {
                let row = &self.kernel.entries[u * n..(u + 1) * n];
                let mut acc = 0.0;
                for (g, xv) in row.iter().zip(x) {
                    acc += g.norm() * xv;
                }
                acc * self.row_albedo[u]
            })
            .collect()
    }

    /// Power-iteration estimate of the spectral radius of |T|.
    pub fn abs_spectral_radius(&self, iterations: usize) -> f64 {
        let n = self.kernel.n;
        if n == 0 {
            return 0.0;
        }
        let mut x = vec![1.0 / n as f64; n];
        let mut lambda = 0.0;
        for _ in 0..iterations {
            let y = self.abs_matvec(&x);
            let norm: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm / x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x = y.iter().map(|v| v / norm).collect();
        }
        lambda
    }

    pub fn dense(&self) -> DMatrix<Complex64> {
        let n = self.kernel.n;
        DMatrix::from_fn(n, n, |u, v| self.entry(u, v))
    }
}

/// Discretizes the scene into one patch per pixel ray-hit.
///
/// `subdivisions` refines the area estimate by casting `s^2` sub-rays per
/// pixel; the patch center and distance always come from the pixel-center
/// ray so recovered direct depth is exact.
pub fn build_patches(
    scene: &SceneDescription,
    cam: &CameraConfig,
    subdivisions: usize,
) -> Result<PatchGrid, TransportError> {
    assert!(subdivisions >= 1, "subdivisions must be >= 1");
    if scene.quads.is_empty() {
        return Err(TransportError::EmptyFrame);
    }
    let pose = &scene.camera_pose;
    let aspect = cam.height as f64 / cam.width as f64;
    let half_w = (cam.horizontal_fov / 2.0).tan();
    // Angular pixel extents on the image plane at unit distance.
    let dx = 2.0 * half_w / cam.width as f64;
    let dy = 2.0 * half_w * aspect / cam.height as f64;

    let mut patches = Vec::new();
    let mut pixel_patch = vec![None; cam.pixels()];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let ray = pose.pixel_ray(cam, x, y);
            let Some((qi, t)) = closest_hit(&scene.quads, &ray) else { continue };
            let quad = &scene.quads[qi];
            let mut normal = quad.normal();
            if normal.dot(ray.dir) > 0.0 {
                normal = -normal;
            }
            let cos_cam = (-ray.dir).dot(normal).max(1e-9);
            let area = if subdivisions == 1 {
                t * t * dx * dy / cos_cam
            } else {
                // Average footprint over sub-rays that hit the same quad.
                let s = subdivisions;
                let mut acc = 0.0;
                let mut hits = 0usize;
                for sy in 0..s {
                    for sx in 0..s {
                        let fx = x as f64 + (sx as f64 + 0.5) / s as f64 - 0.5;
                        let fy = y as f64 + (sy as f64 + 0.5) / s as f64 - 0.5;
                        let u = ((fx + 0.5) / cam.width as f64 * 2.0 - 1.0) * half_w;
                        let v = (1.0 - (fy + 0.5) / cam.height as f64 * 2.0) * half_w * aspect;
                        let dir = (pose.forward + pose.right() * u + pose.up * v).normalized();
                        let sub = crate::geom::Ray { origin: pose.position, dir };
                        if let Some((sq, st)) = closest_hit(&scene.quads, &sub) {
                            if sq == qi {
                                let c = (-dir).dot(normal).max(1e-9);
                                acc += st * st * dx * dy / (c * s as f64 * s as f64);
                                hits += 1;
                            }
                        }
                    }
                }
                if hits == 0 {
                    t * t * dx * dy / cos_cam
                } else {
                    acc * (s * s) as f64 / hits as f64
                }
            };
            let idx = patches.len();
            patches.push(Patch {
                center: ray.origin + ray.dir * t,
                normal,
                area,
                albedo: quad.albedo,
                owner_pixel: Some(y * cam.width + x),
                cam_distance: t,
                cos_cam,
            });
            pixel_patch[y * cam.width + x] = Some(idx);
        }
    }
    if patches.is_empty() {
        return Err(TransportError::EmptyFrame);
    }
    Ok(PatchGrid { patches, width: cam.width, height: cam.height, pixel_patch })
}

/// Single-bounce sensor phasor per pixel:
/// `S(p) = P * rho * cos(t) / d^2 * exp(j 2 pi f (2 d) / c)`.
pub fn direct_phasor(patches: &PatchGrid, cam: &CameraConfig) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); patches.width * patches.height];
    for p in &patches.patches {
        let Some(px) = p.owner_pixel else { continue };
        let amp = cam.emitter_power * p.albedo * p.cos_cam / (p.cam_distance * p.cam_distance);
        let phase = path_phase(2.0 * p.cam_distance, cam.modulation_frequency);
        out[px] = Complex64::from_polar(amp, phase);
    }
    out
}

/// Albedo-independent transfer kernel; rows computed in parallel.
pub fn geometry_kernel(patches: &PatchGrid, quads: &[Quad], frequency: f64) -> GeometryKernel {
    let n = patches.len();
    let mut entries = vec![Complex64::new(0.0, 0.0); n * n];
    entries
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(u, row)| {
            let pu = &patches.patches[u];
            for (v, slot) in row.iter_mut().enumerate() {
                if v == u {
                    continue;
                }
                let pv = &patches.patches[v];
                let d = pv.center - pu.center;
                let r2 = d.dot(d);
                if r2 < 1e-18 {
                    continue;
                }
                let r = r2.sqrt();
                let dir = d * (1.0 / r);
                // Back-facing transfer clamps to zero.
                let cos_u = pu.normal.dot(dir);
                let cos_v = -pv.normal.dot(dir);
                if cos_u <= 0.0 || cos_v <= 0.0 {
                    continue;
                }
                if !segment_visible(quads, pu.center, pv.center) {
                    continue;
                }
                // Point-to-disk form factor: the extra area term in the
                // denominator bounds the transfer as r -> 0, where the bare
                // point-to-point formula diverges and breaks the spectral
                // radius contract.
                let form = cos_u * cos_v * pv.area / (std::f64::consts::PI * r2 + pv.area);
                *slot = Complex64::from_polar(form, path_phase(r, frequency));
            }
        });
    GeometryKernel { n, frequency, entries }
}

/// Builds the transport matrix from a shared kernel; validates the
/// spectral-radius contract.
pub fn transport_from_kernel(
    patches: &PatchGrid,
    kernel: Arc<GeometryKernel>,
    cam: &CameraConfig,
) -> Result<TransportMatrix, TransportError> {
    let row_albedo: Vec<f64> = patches.patches.iter().map(|p| p.albedo).collect();
    let patch_pixel: Vec<usize> =
        patches.patches.iter().map(|p| p.owner_pixel.unwrap_or(usize::MAX)).collect();
    let gather: Vec<Complex64> = patches
        .patches
        .iter()
        .map(|p| Complex64::from_polar(1.0, path_phase(p.cam_distance, cam.modulation_frequency)))
        .collect();
    let t = TransportMatrix {
        frequency: kernel.frequency,
        width: patches.width,
        height: patches.height,
        kernel,
        row_albedo,
        patch_pixel,
        gather,
    };
    let rho = t.abs_spectral_radius(30);
    if rho >= 1.0 {
        return Err(TransportError::UnstableTransport { rho });
    }
    Ok(t)
}

pub fn transport_matrix(
    patches: &PatchGrid,
    quads: &[Quad],
    cam: &CameraConfig,
) -> Result<TransportMatrix, TransportError> {
    let kernel = Arc::new(geometry_kernel(patches, quads, cam.modulation_frequency));
    transport_from_kernel(patches, kernel, cam)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bounces {
    Finite(usize),
    Infinite,
}

impl std::str::FromStr for Bounces {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "infinite" {
            Ok(Bounces::Infinite)
        } else {
            s.parse::<usize>()
                .ok()
                .filter(|&k| k >= 1)
                .map(Bounces::Finite)
                .ok_or_else(|| format!("bounces must be a positive integer or 'infinite', got '{s}'"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimulationResult {
    /// MPI-corrupted measurements (all simulated bounces).
    pub correlations: CorrelationSet,
    /// Single-bounce measurements.
    pub correlations_direct: CorrelationSet,
    /// Geometric ray-hit distance per pixel.
    pub ground_truth: DepthMap,
    pub transport: TransportMatrix,
}

/// Per-patch first-bounce outgoing phasor (illumination leg + reflection).
fn first_bounce(patches: &PatchGrid, cam: &CameraConfig) -> Vec<Complex64> {
    patches
        .patches
        .iter()
        .map(|p| {
            let amp = cam.emitter_power * p.albedo * p.cos_cam / (p.cam_distance * p.cam_distance);
            Complex64::from_polar(amp, path_phase(p.cam_distance, cam.modulation_frequency))
        })
        .collect()
}

fn gather_to_image(t: &TransportMatrix, per_patch: &[Complex64]) -> Vec<Complex64> {
    let mut img = vec![Complex64::new(0.0, 0.0); t.width * t.height];
    for (u, s) in per_patch.iter().enumerate() {
        let px = t.patch_pixel[u];
        if px != usize::MAX {
            img[px] = s * t.gather[u];
        }
    }
    img
}

/// Full forward simulation with a prebuilt patch grid and transport matrix.
pub fn simulate_prepared(
    patches: &PatchGrid,
    transport: TransportMatrix,
    cam: &CameraConfig,
    bounces: Bounces,
) -> Result<SimulationResult, TransportError> {
    let b1 = first_bounce(patches, cam);
    let total = match bounces {
        Bounces::Finite(k) => {
            let mut total = b1.clone();
            let mut p = b1.clone();
            for _ in 1..k {
                p = transport.matvec(&p);
                for (t, s) in total.iter_mut().zip(&p) {
                    *t += s;
                }
            }
            total
        }
        Bounces::Infinite => {
            let n = transport.n();
            let a = DMatrix::<Complex64>::identity(n, n) - transport.dense();
            let rhs = nalgebra::DVector::from_column_slice(&b1);
            match a.lu().solve(&rhs) {
                Some(x) => x.as_slice().to_vec(),
                None => return Err(TransportError::SingularSolve),
            }
        }
    };
    let corrupted_img = gather_to_image(&transport, &total);
    let direct_img = gather_to_image(&transport, &b1);
    let correlations = correlations_from_phasor(&corrupted_img, transport.width, transport.height);
    let correlations_direct = correlations_from_phasor(&direct_img, transport.width, transport.height);
    let mut gt = DepthMap::filled(transport.width, transport.height, NO_HIT);
    for p in &patches.patches {
        if let Some(px) = p.owner_pixel {
            gt.values[px] = p.cam_distance as f32;
        }
    }
    Ok(SimulationResult { correlations, correlations_direct, ground_truth: gt, transport })
}

/// End-to-end simulation of a scene at K bounces (or the exact
/// infinite-bounce solve).
pub fn simulate(
    scene: &SceneDescription,
    cam: &CameraConfig,
    bounces: Bounces,
) -> Result<SimulationResult, TransportError> {
    let patches = build_patches(scene, cam, 1)?;
    let transport = transport_matrix(&patches, &scene.quads, cam)?;
    simulate_prepared(&patches, transport, cam, bounces)
}

/// Exact inverse of the infinite-bounce forward model: recovers the
/// single-bounce correlations from MPI-corrupted ones using the known
/// transport matrix.
pub fn deconvolve_oracle(
    corrupted: &CorrelationSet,
    t: &TransportMatrix,
    cam: &CameraConfig,
) -> Result<CorrelationSet, TransportError> {
    if corrupted.width != t.width
        || corrupted.height != t.height
        || (t.frequency - cam.modulation_frequency).abs() > 1e-6
    {
        return Err(TransportError::Mismatch {
            t_w: t.width,
            t_h: t.height,
            t_f: t.frequency,
            i_w: corrupted.width,
            i_h: corrupted.height,
            i_f: cam.modulation_frequency,
        });
    }
    let phasor = corrupted.to_phasor();
    let n = t.n();
    // Undo the return-leg phase to get per-patch total outgoing phasors.
    let mut total = vec![Complex64::new(0.0, 0.0); n];
    for u in 0..n {
        let px = t.patch_pixel[u];
        if px != usize::MAX {
            total[u] = phasor[px] * t.gather[u].conj();
        }
    }
    // B1 = (I - T) B_total.
    let tb = t.matvec(&total);
    let b1: Vec<Complex64> = total.iter().zip(&tb).map(|(a, b)| a - b).collect();
    let direct_img = gather_to_image(t, &b1);
    // Pixels without a patch pass through unchanged.
    let mut out = correlations_from_phasor(&direct_img, t.width, t.height);
    for u in 0..t.width * t.height {
        if phasor[u].norm() == 0.0 {
            for k in 0..4 {
                out.planes[k][u] = corrupted.planes[k][u];
            }
        }
    }
    Ok(out)
}
