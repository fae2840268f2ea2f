//! Minimal 3-D geometry: vectors, rays and planar quads.
//!
//! Scenes are built exclusively from planar quads, so exact ray-quad
//! intersection is all the visibility machinery we need.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self * (1.0 / n)
    }

    pub fn scale(self, k: f64) -> Vec3 {
        self * k
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

/// Planar parallelogram patch: `corner + s*edge_a + t*edge_b`, `s, t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quad {
    pub corner: Vec3,
    pub edge_a: Vec3,
    pub edge_b: Vec3,
    pub albedo: f64,
}

impl Quad {
    pub fn normal(&self) -> Vec3 {
        self.edge_a.cross(self.edge_b).normalized()
    }

    pub fn centroid(&self) -> Vec3 {
        self.corner + self.edge_a * 0.5 + self.edge_b * 0.5
    }

    /// Ray-quad intersection; returns the ray parameter t (distance for unit
    /// directions) when the hit lies inside the parallelogram and `t > eps`.
    pub fn intersect(&self, ray: &Ray) -> Option<f64> {
        let n = self.edge_a.cross(self.edge_b);
        let denom = ray.dir.dot(n);
        if denom.abs() < 1e-14 {
            return None;
        }
        let t = (self.corner - ray.origin).dot(n) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit = ray.origin + ray.dir * t - self.corner;
        // Solve hit = s*edge_a + u*edge_b in the quad plane.
        let aa = self.edge_a.dot(self.edge_a);
        let ab = self.edge_a.dot(self.edge_b);
        let bb = self.edge_b.dot(self.edge_b);
        let ha = hit.dot(self.edge_a);
        let hb = hit.dot(self.edge_b);
        let det = aa * bb - ab * ab;
        if det.abs() < 1e-18 {
            return None;
        }
        let s = (ha * bb - hb * ab) / det;
        let u = (hb * aa - ha * ab) / det;
        let e = 1e-9;
        if s < -e || s > 1.0 + e || u < -e || u > 1.0 + e {
            return None;
        }
        Some(t)
    }
}

/// Closest hit over a quad list; returns `(quad index, distance)`.
pub fn closest_hit(quads: &[Quad], ray: &Ray) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, q) in quads.iter().enumerate() {
        if let Some(t) = q.intersect(ray) {
            if best.map_or(true, |(_, bt)| t < bt) {
                best = Some((i, t));
            }
        }
    }
    best
}

/// True when the open segment between `a` and `b` is unobstructed.
///
/// Endpoints sit on scene surfaces, so hits within `eps` of either end are
/// ignored instead of applying a shadow bias.
pub fn segment_visible(quads: &[Quad], a: Vec3, b: Vec3) -> bool {
    let d = b - a;
    let len = d.norm();
    if len < 1e-12 {
        return false;
    }
    let ray = Ray { origin: a, dir: d * (1.0 / len) };
    let eps = 1e-7 * len.max(1.0);
    for q in quads {
        if let Some(t) = q.intersect(&ray) {
            if t > eps && t < len - eps {
                return false;
            }
        }
    }
    true
}
