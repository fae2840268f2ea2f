//! File formats: the DTF1 image container, 16-bit PGM export for visual
//! inspection, and the line-oriented scene text format.
//!
//! DTF1 layout: 16-byte header (magic `DTF1`, u32 LE width, u32 LE height,
//! u32 LE channel word) followed by channel planes of width*height f32 LE
//! row-major values. The channel word is 0 for a plain depth map (one
//! plane, meters, -1.0 = no hit), 2 for a complex image (re, im planes) and
//! 4 for a correlation set (c1..c4 planes).

use crate::geom::{Quad, Vec3};
use crate::scenegen::{CameraPose, SceneDescription, SceneFamily};
use crate::sensor::{CorrelationSet, DepthMap};
use num_complex::Complex64;
use std::io::{Read, Write};
use std::path::Path;

pub const DTF_MAGIC: &[u8; 4] = b"DTF1";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a DTF1 file")]
    BadMagic { path: String },
    #[error("{path}: unexpected channel word {got}, expected {want}")]
    BadChannels { path: String, got: u32, want: &'static str },
    #[error("{path}: truncated payload")]
    Truncated { path: String },
    #[error("{path}: malformed scene line {line}: {reason}")]
    BadScene { path: String, line: usize, reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::Io { path: path.display().to_string(), source }
}

fn write_dtf(path: &Path, width: u32, height: u32, channels: u32, planes: &[&[f32]]) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + planes.len() * (width * height) as usize * 4);
    buf.extend_from_slice(DTF_MAGIC);
    buf.extend_from_slice(&width.to_le_bytes());
    buf.extend_from_slice(&height.to_le_bytes());
    buf.extend_from_slice(&channels.to_le_bytes());
    for plane in planes {
        debug_assert_eq!(plane.len(), (width * height) as usize);
        for v in *plane {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_dtf(path: &Path) -> Result<(u32, u32, u32, Vec<f32>), IoError> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    f.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    if &header[0..4] != DTF_MAGIC {
        return Err(IoError::BadMagic { path: path.display().to_string() });
    }
    let width = u32::from_le_bytes(header[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(header[8..12].try_into().unwrap());
    let channels = u32::from_le_bytes(header[12..16].try_into().unwrap());
    let planes = if channels == 0 { 1 } else { channels as usize };
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| io_err(path, e))?;
    let want = planes * (width * height) as usize * 4;
    if raw.len() < want {
        return Err(IoError::Truncated { path: path.display().to_string() });
    }
    let data = raw[..want]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((width, height, channels, data))
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), IoError> {
    write_dtf(path, depth.width as u32, depth.height as u32, 0, &[&depth.values])
}

pub fn read_depth(path: &Path) -> Result<DepthMap, IoError> {
    let (w, h, c, data) = read_dtf(path)?;
    if c != 0 && c != 1 {
        return Err(IoError::BadChannels { path: path.display().to_string(), got: c, want: "0 or 1 (depth)" });
    }
    Ok(DepthMap { width: w as usize, height: h as usize, values: data })
}

pub fn write_correlations(path: &Path, corr: &CorrelationSet) -> Result<(), IoError> {
    let planes: Vec<Vec<f32>> = corr
        .planes
        .iter()
        .map(|p| p.iter().map(|&v| v as f32).collect())
        .collect();
    let refs: Vec<&[f32]> = planes.iter().map(|p| p.as_slice()).collect();
    write_dtf(path, corr.width as u32, corr.height as u32, 4, &refs)
}

pub fn read_correlations(path: &Path) -> Result<CorrelationSet, IoError> {
    let (w, h, c, data) = read_dtf(path)?;
    if c != 4 {
        return Err(IoError::BadChannels { path: path.display().to_string(), got: c, want: "4 (correlations)" });
    }
    let n = (w * h) as usize;
    let mut out = CorrelationSet::zeros(w as usize, h as usize);
    for k in 0..4 {
        for i in 0..n {
            out.planes[k][i] = data[k * n + i] as f64;
        }
    }
    Ok(out)
}

pub fn write_complex(path: &Path, img: &[Complex64], width: usize, height: usize) -> Result<(), IoError> {
    let re: Vec<f32> = img.iter().map(|c| c.re as f32).collect();
    let im: Vec<f32> = img.iter().map(|c| c.im as f32).collect();
    write_dtf(path, width as u32, height as u32, 2, &[&re, &im])
}

pub fn read_complex(path: &Path) -> Result<(Vec<Complex64>, usize, usize), IoError> {
    let (w, h, c, data) = read_dtf(path)?;
    if c != 2 {
        return Err(IoError::BadChannels { path: path.display().to_string(), got: c, want: "2 (complex)" });
    }
    let n = (w * h) as usize;
    let img = (0..n).map(|i| Complex64::new(data[i] as f64, data[n + i] as f64)).collect();
    Ok((img, w as usize, h as usize))
}

/// 16-bit PGM with depth linearly mapped over [lo, hi]; the mapping range
/// is recorded in a `.range.txt` sidecar. No-hit pixels map to 0.
pub fn write_pgm16(path: &Path, depth: &DepthMap, lo: f32, hi: f32) -> Result<(), IoError> {
    let mut buf = Vec::new();
    write!(buf, "P5\n{} {}\n65535\n", depth.width, depth.height).unwrap();
    let span = (hi - lo).max(1e-9);
    for &v in &depth.values {
        let q = if v < 0.0 {
            0u16
        } else {
            (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16
        };
        buf.extend_from_slice(&q.to_be_bytes());
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))?;
    let sidecar = path.with_extension("range.txt");
    std::fs::write(&sidecar, format!("depth_min_m {lo}\ndepth_max_m {hi}\n"))
        .map_err(|e| io_err(&sidecar, e))
}

/// Scene text format, one record per line:
/// `# scene <id> <family>`, `camera px py pz fx fy fz ux uy uz`,
/// then one `quad cx cy cz ax ay az bx by bz albedo` per quad.
pub fn write_scene(path: &Path, scene: &SceneDescription) -> Result<(), IoError> {
    let mut out = String::new();
    out.push_str(&format!("# scene {} {}\n", scene.scene_id, scene.family.name()));
    let p = scene.camera_pose;
    out.push_str(&format!(
        "camera {} {} {} {} {} {} {} {} {}\n",
        p.position.x, p.position.y, p.position.z,
        p.forward.x, p.forward.y, p.forward.z,
        p.up.x, p.up.y, p.up.z
    ));
    for q in &scene.quads {
        out.push_str(&format!(
            "quad {} {} {} {} {} {} {} {} {} {}\n",
            q.corner.x, q.corner.y, q.corner.z,
            q.edge_a.x, q.edge_a.y, q.edge_a.z,
            q.edge_b.x, q.edge_b.y, q.edge_b.z,
            q.albedo
        ));
    }
    std::fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn read_scene(path: &Path) -> Result<SceneDescription, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, reason: &str| IoError::BadScene {
        path: path.display().to_string(),
        line,
        reason: reason.to_string(),
    };
    let mut scene_id = String::from("unnamed");
    let mut family = SceneFamily::Corner;
    let mut camera = None;
    let mut quads = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields[0] {
            "#" => {
                if fields.len() >= 4 && fields[1] == "scene" {
                    scene_id = fields[2].to_string();
                    family = fields[3].parse().map_err(|e: String| bad(ln + 1, &e))?;
                }
            }
            "camera" => {
                let v: Vec<f64> = fields[1..]
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(ln + 1, "non-numeric camera field"))?;
                if v.len() != 9 {
                    return Err(bad(ln + 1, "camera line needs 9 floats"));
                }
                camera = Some(CameraPose {
                    position: Vec3::new(v[0], v[1], v[2]),
                    forward: Vec3::new(v[3], v[4], v[5]).normalized(),
                    up: Vec3::new(v[6], v[7], v[8]).normalized(),
                });
            }
            "quad" => {
                let v: Vec<f64> = fields[1..]
                    .iter()
                    .map(|s| s.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| bad(ln + 1, "non-numeric quad field"))?;
                if v.len() != 10 {
                    return Err(bad(ln + 1, "quad line needs 10 floats"));
                }
                quads.push(Quad {
                    corner: Vec3::new(v[0], v[1], v[2]),
                    edge_a: Vec3::new(v[3], v[4], v[5]),
                    edge_b: Vec3::new(v[6], v[7], v[8]),
                    albedo: v[9],
                });
            }
            other => return Err(bad(ln + 1, &format!("unknown record '{other}'"))),
        }
    }
    let camera_pose = camera.ok_or_else(|| bad(0, "missing camera line"))?;
    Ok(SceneDescription { quads, camera_pose, scene_id, family })
}
