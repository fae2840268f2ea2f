//! Dataset pipeline: simulate scene corpora into paired depth maps,
//! augment with the dihedral group, and split at scene granularity.

use crate::io::{self, IoError};
use crate::scenegen::{
    albedo_variants, generate_scene, viewpoints, GenerationSpec, SceneGenError,
};
use crate::sensor::{depth_from_correlations, CameraConfig, DepthMap, SensorError};
use crate::transport::{
    build_patches, geometry_kernel, simulate_prepared, transport_from_kernel, Bounces,
    TransportError,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub const DIHEDRAL_VARIANTS: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Scene(#[from] SceneGenError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error("manifest line {line} is not valid JSON: {source}")]
    BadManifestLine { line: usize, source: serde_json::Error },
    #[error("need at least 2 base scenes to split, got {0}")]
    TooFewScenes(usize),
    #[error("split fraction {0} leaves one side empty")]
    DegenerateSplit(f64),
    #[error("file error at {path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
}

/// One input/target pair: MPI-corrupted ToF depth and the geometric depth.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub id: String,
    /// Base scene id; splits keep every pair of a base scene together.
    pub base_scene: String,
    pub input: DepthMap,
    pub target: DepthMap,
}

/// One manifest row. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub base_scene: String,
    pub family: String,
    pub input: String,
    pub target: String,
}

/// Applies element `k` of the dihedral group of the square (0..8):
/// `k % 4` quarter-turns, then a horizontal flip if `k >= 4`.
/// Sentinel pixels move with the image.
pub fn dihedral(map: &DepthMap, k: usize) -> DepthMap {
    assert!(k < DIHEDRAL_VARIANTS, "dihedral index out of range: {k}");
    let mut cur = map.clone();
    for _ in 0..(k % 4) {
        // (x, y) -> (h - 1 - y, x) in the rotated frame.
        let (w, h) = (cur.width, cur.height);
        let mut out = DepthMap::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                out.values[x * h + (h - 1 - y)] = cur.values[y * w + x];
            }
        }
        cur = out;
    }
    if k >= 4 {
        let (w, h) = (cur.width, cur.height);
        let mut out = DepthMap::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                out.values[y * w + (w - 1 - x)] = cur.values[y * w + x];
            }
        }
        cur = out;
    }
    cur
}

/// Index of the inverse group element of `k`.
pub fn dihedral_inverse(k: usize) -> usize {
    if k >= 4 || k % 4 == 0 {
        k
    } else {
        4 - k
    }
}

/// All eight dihedral variants of a pair; ids get a `/d<k>` suffix.
pub fn augment_pair(pair: &SamplePair) -> Vec<SamplePair> {
    (0..DIHEDRAL_VARIANTS)
        .map(|k| SamplePair {
            id: format!("{}/d{}", pair.id, k),
            base_scene: pair.base_scene.clone(),
            input: dihedral(&pair.input, k),
            target: dihedral(&pair.target, k),
        })
        .collect()
}

pub fn augment_pairs(pairs: &[SamplePair]) -> Vec<SamplePair> {
    pairs.iter().flat_map(augment_pair).collect()
}

/// Scene-level split: every entry of a base scene lands on the same side.
/// Scenes are shuffled deterministically from `seed` before the cut.
pub fn split_entries(
    entries: &[ManifestEntry],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<ManifestEntry>, Vec<ManifestEntry>), DatasetError> {
    let mut by_scene: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        by_scene.entry(e.base_scene.as_str()).or_default().push(e);
    }
    let n_scenes = by_scene.len();
    if n_scenes < 2 {
        return Err(DatasetError::TooFewScenes(n_scenes));
    }
    let mut scenes: Vec<&str> = by_scene.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scenes.shuffle(&mut rng);
    let n_train = (train_fraction * n_scenes as f64).round() as usize;
    if n_train == 0 || n_train == n_scenes {
        return Err(DatasetError::DegenerateSplit(train_fraction));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let dst = if i < n_train { &mut train } else { &mut test };
        for e in &by_scene[s] {
            dst.push((*e).clone());
        }
    }
    Ok((train, test))
}

fn file_id(id: &str) -> String {
    id.replace('/', "_")
}

/// Simulates the full corpus described by `spec` into `out_dir`.
///
/// For each base scene and viewpoint the patch geometry and the
/// albedo-independent transfer kernel are built once and shared across all
/// albedo variants. Samples whose output files already exist are skipped,
/// so an interrupted build resumes where it stopped.
pub fn build_dataset(
    spec: &GenerationSpec,
    bounces: Bounces,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<Vec<ManifestEntry>, DatasetError> {
    let cam = CameraConfig { width: spec.resolution, height: spec.resolution, ..CameraConfig::default() };
    let pairs_dir = out_dir.join("pairs");
    std::fs::create_dir_all(&pairs_dir)
        .map_err(|e| DatasetError::File { path: pairs_dir.clone(), source: e })?;
    let mut entries = Vec::new();
    for (fi, family) in spec.families.iter().enumerate() {
        for si in 0..spec.scenes_per_family {
            let sseed = spec
                .seed
                .wrapping_add(((fi * spec.scenes_per_family + si) as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let base = generate_scene(*family, sseed);
            let variants = albedo_variants(&base, spec);
            let poses = viewpoints(&base, spec, &cam)?;
            for (vi, pose) in poses.iter().enumerate() {
                let mut shared_kernel = None;
                for variant in &variants {
                    let id = format!("{}/v{}", variant.scene_id, vi);
                    let stem = pairs_dir.join(file_id(&id));
                    let input_path = stem.with_extension("input.dtf");
                    let target_path = stem.with_extension("target.dtf");
                    let entry = ManifestEntry {
                        id: id.clone(),
                        base_scene: base.scene_id.clone(),
                        family: family.name().to_string(),
                        input: format!("pairs/{}", input_path.file_name().unwrap().to_string_lossy()),
                        target: format!("pairs/{}", target_path.file_name().unwrap().to_string_lossy()),
                    };
                    if input_path.exists() && target_path.exists() {
                        entries.push(entry);
                        continue;
                    }
                    let mut posed = variant.clone();
                    posed.camera_pose = pose.clone();
                    let patches = build_patches(&posed, &cam, 1)?;
                    // Kernel geometry is albedo-independent, so the first
                    // variant's kernel serves every variant at this pose.
                    let kernel = shared_kernel
                        .get_or_insert_with(|| {
                            Arc::new(geometry_kernel(&patches, &posed.quads, cam.modulation_frequency))
                        })
                        .clone();
                    let transport = transport_from_kernel(&patches, kernel, &cam)?;
                    let result = simulate_prepared(&patches, transport, &cam, bounces)?;
                    let measured = depth_from_correlations(&result.correlations, &cam)?;
                    io::write_depth(&input_path, &measured)?;
                    io::write_depth(&target_path, &result.ground_truth)?;
                    progress(&id);
                    entries.push(entry);
                }
            }
        }
    }
    write_manifest(&out_dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DatasetError> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| DatasetError::File { path: path.into(), source: e })?,
    );
    for e in entries {
        serde_json::to_writer(&mut f, e)
            .map_err(|e| DatasetError::BadManifestLine { line: 0, source: e })?;
        writeln!(f).map_err(|e| DatasetError::File { path: path.into(), source: e })?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let f = std::fs::File::open(path).map_err(|e| DatasetError::File { path: path.into(), source: e })?;
    let mut entries = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DatasetError::File { path: path.into(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(
            serde_json::from_str(&line)
                .map_err(|e| DatasetError::BadManifestLine { line: i + 1, source: e })?,
        );
    }
    Ok(entries)
}

/// Loads the depth pairs referenced by manifest entries. `root` is the
/// directory holding the manifest. Works equally for simulated corpora and
/// externally captured depth maps that follow the same layout.
pub fn load_pairs(root: &Path, entries: &[ManifestEntry]) -> Result<Vec<SamplePair>, DatasetError> {
    entries
        .iter()
        .map(|e| {
            Ok(SamplePair {
                id: e.id.clone(),
                base_scene: e.base_scene.clone(),
                input: io::read_depth(&root.join(&e.input))?,
                target: io::read_depth(&root.join(&e.target))?,
            })
        })
        .collect()
}
