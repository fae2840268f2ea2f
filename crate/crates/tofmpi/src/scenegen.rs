//! Deterministic procedural scenes: corners, V-shapes and Cornell-style
//! boxes with optional prism clutter, plus albedo and viewpoint variation.
//!
//! Everything is a pure function of (family, seed), so dataset builds are
//! reproducible and individual samples can be regenerated on demand.

use crate::geom::{Quad, Ray, Vec3};
use crate::sensor::CameraConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Interior dimensions of the reference box scene, meters (w, h, d).
pub const BOX_DIMENSIONS: (f64, f64, f64) = (0.600, 0.500, 0.640);
/// Albedo of the barium-sulfate paint preset used for box reproductions.
pub const BARIUM_ALBEDO: f64 = 0.85;
/// Opening-angle range for corner and V-shape families, degrees.
pub const OPENING_ANGLE_DEG: (f64, f64) = (20.0, 120.0);

#[derive(Debug, thiserror::Error)]
pub enum SceneGenError {
    #[error("cannot frame scene: centroid misses the central third of the frame at every candidate distance")]
    ImpossibleFraming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneFamily {
    Corner,
    Vshape,
    Box,
    BoxWithProps,
}

impl SceneFamily {
    pub const ALL: [SceneFamily; 4] =
        [SceneFamily::Corner, SceneFamily::Vshape, SceneFamily::Box, SceneFamily::BoxWithProps];

    pub fn name(self) -> &'static str {
        match self {
            SceneFamily::Corner => "corner",
            SceneFamily::Vshape => "vshape",
            SceneFamily::Box => "box",
            SceneFamily::BoxWithProps => "box_with_props",
        }
    }
}

impl std::str::FromStr for SceneFamily {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "corner" => Ok(SceneFamily::Corner),
            "vshape" => Ok(SceneFamily::Vshape),
            "box" => Ok(SceneFamily::Box),
            "box_with_props" => Ok(SceneFamily::BoxWithProps),
            other => Err(format!("unknown scene family '{other}'")),
        }
    }
}

/// Camera placement: position plus an orthonormal look frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub position: Vec3,
    /// Unit forward direction.
    pub forward: Vec3,
    /// Unit up direction, orthogonal to forward.
    pub up: Vec3,
}

impl CameraPose {
    pub fn look_at(position: Vec3, target: Vec3, up_hint: Vec3) -> CameraPose {
        let forward = (target - position).normalized();
        let right = forward.cross(up_hint).normalized();
        let up = right.cross(forward).normalized();
        CameraPose { position, forward, up }
    }

    pub fn right(&self) -> Vec3 {
        self.forward.cross(self.up).normalized()
    }

    /// Ray through the center of pixel (x, y).
    pub fn pixel_ray(&self, cam: &CameraConfig, x: usize, y: usize) -> Ray {
        let aspect = cam.height as f64 / cam.width as f64;
        let half_w = (cam.horizontal_fov / 2.0).tan();
        let half_h = half_w * aspect;
        let u = ((x as f64 + 0.5) / cam.width as f64 * 2.0 - 1.0) * half_w;
        let v = (1.0 - (y as f64 + 0.5) / cam.height as f64 * 2.0) * half_h;
        let dir = (self.forward + self.right() * u + self.up * v).normalized();
        Ray { origin: self.position, dir }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub quads: Vec<Quad>,
    pub camera_pose: CameraPose,
    pub scene_id: String,
    pub family: SceneFamily,
}

impl SceneDescription {
    pub fn centroid(&self) -> Vec3 {
        let mut c = Vec3::ZERO;
        for q in &self.quads {
            c = c + q.centroid();
        }
        c * (1.0 / self.quads.len() as f64)
    }

    /// Radius of the bounding sphere around the centroid, over quad corners.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        let mut r: f64 = 0.0;
        for q in &self.quads {
            for p in [q.corner, q.corner + q.edge_a, q.corner + q.edge_b, q.corner + q.edge_a + q.edge_b] {
                r = r.max((p - c).norm());
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub seed: u64,
    pub families: Vec<SceneFamily>,
    pub scenes_per_family: usize,
    pub albedo_variants_per_scene: usize,
    pub albedo_range: (f64, f64),
    pub viewpoints_per_scene: usize,
    pub camera_distance_range: (f64, f64),
    pub bounce_count: usize,
    pub resolution: usize,
}

impl Default for GenerationSpec {
    fn default() -> Self {
        GenerationSpec {
            seed: 0,
            families: SceneFamily::ALL.to_vec(),
            scenes_per_family: 2,
            albedo_variants_per_scene: 6,
            albedo_range: (0.3, 0.8),
            viewpoints_per_scene: 7,
            camera_distance_range: (0.5, 2.4),
            bounce_count: 20,
            resolution: 64,
        }
    }
}

impl GenerationSpec {
    pub fn base_pair_count(&self) -> usize {
        self.families.len() * self.scenes_per_family * self.albedo_variants_per_scene * self.viewpoints_per_scene
    }
}

fn family_rng(family: SceneFamily, seed: u64, stream: u64) -> ChaCha8Rng {
    // Stable per-(family, seed, purpose) stream.
    let mix = seed
        ^ (family as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Two quads sharing an edge with the given opening angle (radians); the
/// shared edge runs along `axis`.
fn wedge(opening: f64, side: f64, axis: Vec3, albedo: f64) -> Vec<Quad> {
    let half = opening / 2.0;
    // Plane directions fanning out from the shared edge at z = 0.
    let d1 = Vec3::new((-half).sin(), 0.0, (-half).cos());
    let d2 = Vec3::new(half.sin(), 0.0, half.cos());
    let (d1, d2, edge) = if axis.y.abs() > 0.5 {
        (d1, d2, Vec3::new(0.0, side, 0.0))
    } else {
        // Horizontal shared edge: rotate the fan into the x-y plane.
        (
            Vec3::new(0.0, (-half).sin(), (-half).cos()),
            Vec3::new(0.0, half.sin(), half.cos()),
            Vec3::new(side, 0.0, 0.0),
        )
    };
    vec![
        Quad { corner: edge * -0.5, edge_a: edge, edge_b: d1 * side, albedo },
        Quad { corner: edge * -0.5, edge_a: edge, edge_b: d2 * side, albedo },
    ]
}

fn box_quads(w: f64, h: f64, d: f64, albedo: f64) -> Vec<Quad> {
    // Interior of an open box: back wall, floor, ceiling, two side walls.
    // The open face looks toward +z; the camera is placed outside it.
    let x0 = -w / 2.0;
    let x1 = w / 2.0;
    let y0 = -h / 2.0;
    let y1 = h / 2.0;
    let z0 = -d / 2.0;
    let ex = Vec3::new(w, 0.0, 0.0);
    let ey = Vec3::new(0.0, h, 0.0);
    let ez = Vec3::new(0.0, 0.0, d);
    vec![
        // back wall
        Quad { corner: Vec3::new(x0, y0, z0), edge_a: ex, edge_b: ey, albedo },
        // floor
        Quad { corner: Vec3::new(x0, y0, z0), edge_a: ex, edge_b: ez, albedo },
        // ceiling
        Quad { corner: Vec3::new(x0, y1, z0), edge_a: ex, edge_b: ez, albedo },
        // left wall
        Quad { corner: Vec3::new(x0, y0, z0), edge_a: ey, edge_b: ez, albedo },
        // right wall
        Quad { corner: Vec3::new(x1, y0, z0), edge_a: ey, edge_b: ez, albedo },
    ]
}

/// Axis-aligned block of the given size centered at `center`; only the five
/// faces that can face the camera side (+z and laterals) are emitted.
fn prism_quads(center: Vec3, size: Vec3, albedo: f64) -> Vec<Quad> {
    let hx = size.x / 2.0;
    let hy = size.y / 2.0;
    let hz = size.z / 2.0;
    let ex = Vec3::new(size.x, 0.0, 0.0);
    let ey = Vec3::new(0.0, size.y, 0.0);
    let ez = Vec3::new(0.0, 0.0, size.z);
    vec![
        // front (+z)
        Quad { corner: center + Vec3::new(-hx, -hy, hz), edge_a: ex, edge_b: ey, albedo },
        // top
        Quad { corner: center + Vec3::new(-hx, hy, -hz), edge_a: ex, edge_b: ez, albedo },
        // left
        Quad { corner: center + Vec3::new(-hx, -hy, -hz), edge_a: ey, edge_b: ez, albedo },
        // right
        Quad { corner: center + Vec3::new(hx, -hy, -hz), edge_a: ey, edge_b: ez, albedo },
    ]
}

/// Deterministic scene for (family, seed). Same inputs, identical output.
pub fn generate_scene(family: SceneFamily, seed: u64) -> SceneDescription {
    let mut rng = family_rng(family, seed, 1);
    let (lo, hi) = OPENING_ANGLE_DEG;
    let quads = match family {
        SceneFamily::Corner => {
            let opening = rng.gen_range(lo..=hi).to_radians();
            let side = rng.gen_range(0.6..1.4);
            wedge(opening, side, Vec3::new(0.0, 1.0, 0.0), BARIUM_ALBEDO)
        }
        SceneFamily::Vshape => {
            let opening = rng.gen_range(lo..=hi).to_radians();
            let side = rng.gen_range(0.6..1.4);
            wedge(opening, side, Vec3::new(1.0, 0.0, 0.0), BARIUM_ALBEDO)
        }
        SceneFamily::Box => {
            let (w, h, d) = BOX_DIMENSIONS;
            let mut quads = box_quads(w, h, d, BARIUM_ALBEDO);
            // Optional panel leaning into the box, 0.4-1.2 m.
            if rng.gen_bool(0.5) {
                let pw = rng.gen_range(0.4..1.2_f64).min(w * 0.8);
                let ph = rng.gen_range(0.4..1.2_f64).min(h * 0.8);
                let x = rng.gen_range(-w * 0.25..w * 0.25);
                quads.push(Quad {
                    corner: Vec3::new(x - pw / 2.0, -h / 2.0 + 0.01, -d / 2.0 + 0.05),
                    edge_a: Vec3::new(pw, 0.0, 0.0),
                    edge_b: Vec3::new(0.0, ph * 0.9, ph * 0.3),
                    albedo: BARIUM_ALBEDO,
                });
            }
            quads
        }
        SceneFamily::BoxWithProps => {
            let (w, h, d) = BOX_DIMENSIONS;
            let mut quads = box_quads(w, h, d, BARIUM_ALBEDO);
            // Prism clutter in three sizes.
            let sizes = [
                Vec3::new(0.08, 0.12, 0.08),
                Vec3::new(0.12, 0.20, 0.12),
                Vec3::new(0.18, 0.10, 0.18),
            ];
            let count = rng.gen_range(1..=3usize);
            for i in 0..count {
                let s = sizes[i % sizes.len()];
                let cx = rng.gen_range(-w * 0.3..w * 0.3);
                let cz = rng.gen_range(-d * 0.3..d * 0.3);
                quads.extend(prism_quads(
                    Vec3::new(cx, -h / 2.0 + s.y / 2.0 + 1e-3, cz),
                    s,
                    BARIUM_ALBEDO,
                ));
            }
            quads
        }
    };
    let scene_id = format!("{}-{:08x}", family.name(), seed);
    SceneDescription {
        quads,
        camera_pose: default_pose_for(family),
        scene_id,
        family,
    }
}

fn default_pose_for(family: SceneFamily) -> CameraPose {
    let dist = match family {
        SceneFamily::Box | SceneFamily::BoxWithProps => 1.2,
        _ => 1.5,
    };
    CameraPose::look_at(Vec3::new(0.0, 0.0, dist + 0.32), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0))
}

/// N copies of `scene` differing only in per-quad albedos, each drawn
/// independently and uniformly from `spec.albedo_range`.
pub fn albedo_variants(scene: &SceneDescription, spec: &GenerationSpec) -> Vec<SceneDescription> {
    assert!(spec.albedo_variants_per_scene >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(&scene.scene_id));
    let (lo, hi) = spec.albedo_range;
    (0..spec.albedo_variants_per_scene)
        .map(|k| {
            let mut v = scene.clone();
            for q in v.quads.iter_mut() {
                q.albedo = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
            }
            v.scene_id = format!("{}/a{}", scene.scene_id, k);
            v
        })
        .collect()
}

/// Deterministic camera poses around the scene: distances within
/// `camera_distance_range`, aimed so the centroid projects inside the
/// central third of the frame (guaranteed by aiming at the centroid).
pub fn viewpoints(
    scene: &SceneDescription,
    spec: &GenerationSpec,
    cam: &CameraConfig,
) -> Result<Vec<CameraPose>, SceneGenError> {
    assert!(spec.viewpoints_per_scene >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ stable_hash(&scene.scene_id) ^ 0x5eed_u64);
    let target = scene.centroid();
    let radius = scene.bounding_radius();
    let (dlo, dhi) = spec.camera_distance_range;
    // The scene must fit the frustum at the largest allowed distance.
    let half_fov = cam.horizontal_fov / 2.0;
    if radius / dhi > (half_fov).tan() * 3.0 {
        return Err(SceneGenError::ImpossibleFraming);
    }
    let mut poses = Vec::with_capacity(spec.viewpoints_per_scene);
    for _ in 0..spec.viewpoints_per_scene {
        let dist = rng.gen_range(dlo..=dhi);
        // Keep the camera on the open (+z) side, jittered off-axis.
        let yaw = rng.gen_range(-0.35..0.35_f64);
        let pitch = rng.gen_range(-0.25..0.25_f64);
        let dir = Vec3::new(yaw.sin() * pitch.cos(), pitch.sin(), yaw.cos() * pitch.cos());
        let position = target + dir * dist;
        poses.push(CameraPose::look_at(position, target, Vec3::new(0.0, 1.0, 0.0)));
    }
    Ok(poses)
}

/// FNV-1a over the id string; stable across runs and platforms.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Base scene identifier (before any `/a<k>` albedo-variant suffix).
pub fn base_scene_id(id: &str) -> &str {
    id.split('/').next().unwrap_or(id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_scene_has_reference_dimensions() {
        let s = generate_scene(SceneFamily::Box, 0);
        // Back wall spans the full width and height of the reference box.
        let back = &s.quads[0];
        assert!((back.edge_a.norm() - 0.600).abs() < 1e-12);
        assert!((back.edge_b.norm() - 0.500).abs() < 1e-12);
        let floor = &s.quads[1];
        assert!((floor.edge_b.norm() - 0.640).abs() < 1e-12);
    }

    #[test]
    fn corner_is_two_quads_sharing_an_edge() {
        for seed in 0..20 {
            let s = generate_scene(SceneFamily::Corner, seed);
            assert_eq!(s.quads.len(), 2);
            assert_eq!(s.quads[0].corner, s.quads[1].corner);
            assert_eq!(s.quads[0].edge_a, s.quads[1].edge_a);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for family in SceneFamily::ALL {
            let a = generate_scene(family, 42);
            let b = generate_scene(family, 42);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn albedo_variants_preserve_geometry() {
        let s = generate_scene(SceneFamily::Corner, 3);
        let spec = GenerationSpec::default();
        let vs = albedo_variants(&s, &spec);
        assert_eq!(vs.len(), 6);
        for v in &vs {
            assert!(v.scene_id.starts_with(&s.scene_id));
            for (q, q0) in v.quads.iter().zip(&s.quads) {
                assert_eq!(q.corner, q0.corner);
                assert_eq!(q.edge_a, q0.edge_a);
                assert_eq!(q.edge_b, q0.edge_b);
                assert!(q.albedo >= 0.3 && q.albedo <= 0.8);
            }
        }
    }

    #[test]
    fn degenerate_albedo_range_is_exact() {
        let s = generate_scene(SceneFamily::Corner, 3);
        let spec = GenerationSpec {
            albedo_variants_per_scene: 1,
            albedo_range: (0.5, 0.5),
            ..Default::default()
        };
        let vs = albedo_variants(&s, &spec);
        assert!(vs[0].quads.iter().all(|q| q.albedo == 0.5));
    }

    #[test]
    fn viewpoints_respect_distance_and_framing() {
        let s = generate_scene(SceneFamily::Corner, 7);
        let spec = GenerationSpec::default();
        let cam = CameraConfig::default();
        let poses = viewpoints(&s, &spec, &cam).unwrap();
        assert_eq!(poses.len(), 7);
        let target = s.centroid();
        for p in &poses {
            let d = (p.position - target).norm();
            assert!((0.5..=2.4).contains(&d), "distance {d}");
            // Centroid projects into the central third: its direction is
            // exactly the forward axis by construction.
            let to_c = (target - p.position).normalized();
            assert!(to_c.dot(p.forward) > 1.0 - 1e-9);
        }
        let again = viewpoints(&s, &spec, &cam).unwrap();
        assert_eq!(poses, again);
    }

    #[test]
    fn corner_angles_cover_the_range() {
        // Distribution sanity: over 100 seeds the opening angles cover
        // [20, 120] degrees with no gap wider than 15 degrees.
        let mut angles: Vec<f64> = (0..100)
            .map(|seed| {
                let s = generate_scene(SceneFamily::Corner, seed);
                let n0 = s.quads[0].edge_b.normalized();
                let n1 = s.quads[1].edge_b.normalized();
                n0.dot(n1).clamp(-1.0, 1.0).acos().to_degrees()
            })
            .collect();
        angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(angles[0] < 35.0, "low end uncovered: {}", angles[0]);
        assert!(*angles.last().unwrap() > 105.0, "high end uncovered");
        for w in angles.windows(2) {
            assert!(w[1] - w[0] <= 15.0, "gap {} deg", w[1] - w[0]);
        }
    }
}
