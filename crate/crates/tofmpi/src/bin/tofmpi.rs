//! Command-line frontend: simulation, dataset builds, statistics, training,
//! correction, evaluation and ablations.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use tofmpi::analysis::{mpi_error_report, percentile_table};
use tofmpi::dataset::{
    augment_pairs, build_dataset, load_pairs, read_manifest, split_entries, SamplePair,
};
use tofmpi::io;
use tofmpi::network::{
    evaluate, load_checkpoint, run_ablations, save_checkpoint, train, Model, NetworkConfig,
    Stage, TrainConfig,
};
use tofmpi::scenegen::{generate_scene, GenerationSpec, SceneFamily};
use tofmpi::sensor::{depth_from_correlations, CameraConfig};
use tofmpi::stats::{compute_stats, compare, histogram2d_csv, histogram_csv, BinSpec};
use tofmpi::transport::{deconvolve_oracle, simulate, Bounces};

const VERSION_LINE: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (depth tensors: DTF1, checkpoints: DTW1, manifests: jsonl-1)"
);

#[derive(Parser)]
#[command(name = "tofmpi", version = VERSION_LINE, about = "Time-of-flight multipath simulation and correction")]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 1 gives byte-reproducible output.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Shorthand for --threads 1.
    #[arg(long, global = true)]
    deterministic: bool,
    /// TOML run configuration; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one procedural scene and write its depth products.
    Simulate {
        #[arg(long, alias = "family", default_value = "corner")]
        scene: SceneFamily,
        /// Bounce count, or "infinite" for the exact steady state.
        #[arg(long, default_value = "infinite")]
        bounces: Bounces,
        #[arg(long)]
        out: PathBuf,
        /// Also write the oracle-deconvolved depth.
        #[arg(long)]
        deconvolve: bool,
    },
    /// Build the paired depth corpus and its manifest.
    GenDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "infinite")]
        bounces: Bounces,
    },
    /// Depth-statistics report over a dataset (optionally vs a reference).
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Second dataset to compare bin-by-bin.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Use the corrupted inputs instead of ground-truth targets.
        #[arg(long)]
        measured: bool,
    },
    /// Train the corrector. Stage 1 pretrains; stage 2 needs a stage-1
    /// checkpoint unless --from-scratch is set.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u32).range(1..=2))]
        stage: u32,
        /// Stage-1 checkpoint to continue from (stage 2).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Stage 2 without pretraining: whole network trains.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Apply a trained model to depth maps (DTF1 in, DTF1 out).
    Correct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Error report of a trained model on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, alias = "manifest")]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four architecture arms.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Everything a run needs, in one TOML document. `emit` then `parse` is the
/// identity, and the resolved copy lands next to the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    /// Scene-level train fraction.
    split_fraction: f64,
    /// Expand training pairs with the 8 dihedral variants.
    augment: bool,
    camera: CameraConfig,
    generation: GenerationSpec,
    network: NetworkConfig,
    pretrain: TrainConfig,
    correct: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            split_fraction: 0.8,
            augment: true,
            camera: CameraConfig::default(),
            generation: GenerationSpec::default(),
            network: NetworkConfig::default(),
            pretrain: TrainConfig::default(),
            correct: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    fn load(path: Option<&Path>, seed_flag: u64) -> Result<RunConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if seed_flag != 0 || path.is_none() {
            cfg.seed = seed_flag;
        }
        cfg.generation.seed = cfg.seed;
        cfg.pretrain.seed = cfg.seed;
        cfg.correct.seed = cfg.seed;
        Ok(cfg)
    }

    fn emit(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Camera at the generation resolution (dataset and training side).
    fn dataset_camera(&self) -> CameraConfig {
        CameraConfig {
            width: self.generation.resolution,
            height: self.generation.resolution,
            ..self.camera.clone()
        }
    }
}

fn prepare_out(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("run-config.toml"), cfg.emit()?)?;
    Ok(())
}

fn load_splits(cfg: &RunConfig, dataset: &Path) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
    let entries = read_manifest(&dataset.join("manifest.jsonl"))?;
    let (train_e, test_e) = split_entries(&entries, cfg.split_fraction, cfg.seed)?;
    let mut train_pairs = load_pairs(dataset, &train_e)?;
    if cfg.augment {
        train_pairs = augment_pairs(&train_pairs);
    }
    let test_pairs = load_pairs(dataset, &test_e)?;
    Ok((train_pairs, test_pairs))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(t.max(1)).build_global()?;
    }
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;

    match cli.cmd {
        Cmd::Simulate { scene, bounces, out, deconvolve } => {
            prepare_out(&out, &cfg)?;
            let scene = generate_scene(scene, cfg.seed);
            let cam = cfg.dataset_camera();
            let result = simulate(&scene, &cam, bounces)?;
            let measured = depth_from_correlations(&result.correlations, &cam)?;
            let direct = depth_from_correlations(&result.correlations_direct, &cam)?;
            io::write_scene(&out.join("scene.txt"), &scene)?;
            io::write_correlations(&out.join("correlations.dtf"), &result.correlations)?;
            io::write_depth(&out.join("input.dtf"), &measured)?;
            io::write_depth(&out.join("depth-direct.dtf"), &direct)?;
            io::write_depth(&out.join("target.dtf"), &result.ground_truth)?;
            let hi = cam.unambiguous_range() as f32;
            io::write_pgm16(&out.join("input.pgm"), &measured, 0.0, hi)?;
            io::write_pgm16(&out.join("target.pgm"), &result.ground_truth, 0.0, hi)?;
            if deconvolve {
                let clean = deconvolve_oracle(&result.correlations, &result.transport, &cam)?;
                let recovered = depth_from_correlations(&clean, &cam)?;
                io::write_depth(&out.join("depth-deconvolved.dtf"), &recovered)?;
            }
            println!(
                "simulated {} ({} patches) -> {}",
                scene.scene_id,
                result.transport.n(),
                out.display()
            );
        }
        Cmd::GenDataset { out, bounces } => {
            prepare_out(&out, &cfg)?;
            let total = cfg.generation.base_pair_count();
            let mut done = 0usize;
            let entries = build_dataset(&cfg.generation, bounces, &out, |id| {
                done += 1;
                if done % 25 == 0 || done == total {
                    println!("[{done}/{total}] {id}");
                }
            })?;
            println!(
                "dataset at {}: {} base pairs ({} after augmentation)",
                out.display(),
                entries.len(),
                entries.len() * tofmpi::dataset::DIHEDRAL_VARIANTS
            );
        }
        Cmd::Stats { dataset, out, reference, measured } => {
            prepare_out(&out, &cfg)?;
            let maps = load_depths(&dataset, measured)?;
            let bins = BinSpec::default();
            let report = compute_stats(maps.iter(), &bins)?;
            std::fs::write(out.join("depth-hist.csv"), histogram_csv(&report.depth_hist))?;
            std::fs::write(out.join("grad-x-hist.csv"), histogram_csv(&report.dx_hist))?;
            std::fs::write(out.join("grad-y-hist.csv"), histogram_csv(&report.dy_hist))?;
            std::fs::write(out.join("cooccurrence.csv"), histogram2d_csv(&report.cooccurrence))?;
            std::fs::write(out.join("haar-hv.csv"), histogram2d_csv(&report.haar_joint_hv))?;
            std::fs::write(out.join("haar-hd.csv"), histogram2d_csv(&report.haar_joint_hd))?;
            println!(
                "gradient kurtosis: x = {:.3}, y = {:.3}",
                report.kurtosis_x, report.kurtosis_y
            );
            if let Some(ref_path) = reference {
                let ref_maps = load_depths(&ref_path, measured)?;
                let ref_report = compute_stats(ref_maps.iter(), &bins)?;
                let mut csv = String::from("histogram,chi_squared,js_distance,pearson\n");
                for (name, a, b) in [
                    ("depth", &report.depth_hist, &ref_report.depth_hist),
                    ("grad_x", &report.dx_hist, &ref_report.dx_hist),
                    ("grad_y", &report.dy_hist, &ref_report.dy_hist),
                ] {
                    let m = compare(a, b)?;
                    csv.push_str(&format!(
                        "{name},{},{},{}\n",
                        m.chi_squared, m.jensen_shannon, m.pearson
                    ));
                    println!(
                        "{name}: chi2 = {:.4}, js = {:.4}, pearson = {:.4}",
                        m.chi_squared, m.jensen_shannon, m.pearson
                    );
                }
                std::fs::write(out.join("comparison.csv"), csv)?;
            }
        }
        Cmd::Train { dataset, out, stage, checkpoint, from_scratch } => {
            prepare_out(&out, &cfg)?;
            let (train_pairs, _) = load_splits(&cfg, &dataset)?;
            let mut model = match (&checkpoint, stage) {
                (Some(p), _) => load_checkpoint(p)?,
                (None, 1) => Model::new(cfg.network.clone(), cfg.seed),
                (None, 2) if from_scratch => Model::new(cfg.network.clone(), cfg.seed),
                (None, 2) => bail!("stage 2 needs --checkpoint from stage 1, or --from-scratch"),
                _ => unreachable!(),
            };
            let (stage_kind, t_cfg) = if stage == 1 {
                (Stage::Pretrain, &cfg.pretrain)
            } else {
                (Stage::Correct, &cfg.correct)
            };
            let report = train(&mut model, &train_pairs, stage_kind, t_cfg, |e, l| {
                println!("epoch {e}: loss {l:.6}");
            })?;
            let path = out.join(format!("stage{stage}.dtw"));
            save_checkpoint(&model, &path)?;
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in report.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{e},{l}\n"));
            }
            std::fs::write(out.join(format!("stage{stage}-losses.csv")), csv)?;
            println!("checkpoint: {}", path.display());
        }
        Cmd::Correct { checkpoint, input, out } => {
            prepare_out(&out, &cfg)?;
            let model = load_checkpoint(&checkpoint)?;
            let maps: Vec<_> = input
                .iter()
                .map(|p| io::read_depth(p))
                .collect::<Result<_, _>>()?;
            let cam = cfg.dataset_camera();
            let fixed = infer_all(&model, &maps, &cam)?;
            for (src, m) in input.iter().zip(&fixed) {
                let name = src.file_stem().unwrap_or_default().to_string_lossy();
                let dst = out.join(format!("{name}-corrected.dtf"));
                io::write_depth(&dst, m)?;
                println!("{} -> {}", src.display(), dst.display());
            }
        }
        Cmd::Eval { checkpoint, dataset, out } => {
            prepare_out(&out, &cfg)?;
            let model = load_checkpoint(&checkpoint)?;
            let (_, test_pairs) = load_splits(&cfg, &dataset)?;
            let cam = cfg.dataset_camera();
            let result = evaluate("model", &model, &test_pairs, &cam, model.stage1_hash != 0)?;
            let inputs: Vec<_> = test_pairs.iter().map(|p| p.input.clone()).collect();
            let targets: Vec<_> = test_pairs.iter().map(|p| p.target.clone()).collect();
            let corrected = infer_all(&model, &inputs, &cam)?;
            let depth_max = cam.unambiguous_range();
            let before = mpi_error_report(&inputs, &targets, depth_max)?;
            let after = mpi_error_report(&corrected, &targets, depth_max)?;
            std::fs::write(
                out.join("percentiles.csv"),
                percentile_table(&[("uncorrected".into(), &before), ("corrected".into(), &after)]),
            )?;
            std::fs::write(out.join("eval.json"), serde_json::to_string_pretty(&result)?)?;
            println!(
                "MAE {:.4} m -> {:.4} m ({:.1}% better, {:.0}% of images improved)",
                result.uncorrected_mae,
                result.test_mae,
                result.improvement * 100.0,
                result.fraction_improved * 100.0
            );
        }
        Cmd::Ablate { dataset, out } => {
            prepare_out(&out, &cfg)?;
            let (train_pairs, test_pairs) = load_splits(&cfg, &dataset)?;
            let cam = cfg.dataset_camera();
            let results = run_ablations(
                &cfg.network,
                &train_pairs,
                &test_pairs,
                &cfg.pretrain,
                &cfg.correct,
                &cam,
                |arm, phase, e, l| println!("[{arm}/{phase}] epoch {e}: loss {l:.6}"),
            )?;
            let mut csv = String::from(
                "arm,test_mae_m,uncorrected_mae_m,improvement,fraction_improved,per_image_variance\n",
            );
            for r in &results {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.name,
                    r.test_mae,
                    r.uncorrected_mae,
                    r.improvement,
                    r.fraction_improved,
                    r.per_image_variance()
                ));
                println!(
                    "{}: MAE {:.4} m ({:.1}% better)",
                    r.name,
                    r.test_mae,
                    r.improvement * 100.0
                );
            }
            std::fs::write(out.join("ablations.csv"), csv)?;
        }
    }
    Ok(())
}

/// Runs inference, edge-padding each map up to the network's scale factor
/// and cropping the result back to the original size.
fn infer_all(
    model: &Model,
    maps: &[tofmpi::sensor::DepthMap],
    cam: &CameraConfig,
) -> Result<Vec<tofmpi::sensor::DepthMap>> {
    use tofmpi::sensor::DepthMap;
    let factor = 1usize << (model.cfg.scales - 1);
    let mut out = Vec::with_capacity(maps.len());
    for m in maps {
        if m.width % factor == 0 && m.height % factor == 0 {
            out.extend(tofmpi::network::infer(model, std::slice::from_ref(m), cam, 1)?);
            continue;
        }
        let (w2, h2) = (m.width.div_ceil(factor) * factor, m.height.div_ceil(factor) * factor);
        let mut padded = DepthMap::filled(w2, h2, 0.0);
        for y in 0..h2 {
            for x in 0..w2 {
                padded.values[y * w2 + x] =
                    m.values[y.min(m.height - 1) * m.width + x.min(m.width - 1)];
            }
        }
        let fixed = tofmpi::network::infer(model, std::slice::from_ref(&padded), cam, 1)?;
        let mut cropped = DepthMap::filled(m.width, m.height, 0.0);
        for y in 0..m.height {
            for x in 0..m.width {
                cropped.values[y * m.width + x] = fixed[0].values[y * w2 + x];
            }
        }
        out.push(cropped);
    }
    Ok(out)
}

/// All target (or input) depth maps referenced by a dataset manifest.
fn load_depths(dataset: &Path, measured: bool) -> Result<Vec<tofmpi::sensor::DepthMap>> {
    let entries = read_manifest(&dataset.join("manifest.jsonl"))?;
    entries
        .iter()
        .map(|e| {
            let rel = if measured { &e.input } else { &e.target };
            Ok(io::read_depth(&dataset.join(rel))?)
        })
        .collect()
}
