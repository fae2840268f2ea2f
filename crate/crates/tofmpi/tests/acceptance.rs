//! Acceptance suite: one test per criterion, each printing a PASS line on
//! success (run with `cargo test --test acceptance -- --nocapture` to see
//! them; failures abort with the criterion number in the message).

use num_complex::Complex64;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;
use tofmpi::autograd::{Graph, NdArr, TensorId};
use tofmpi::dataset::{
    augment_pairs, build_dataset, load_pairs, split_entries, ManifestEntry, SamplePair,
    DIHEDRAL_VARIANTS,
};
use tofmpi::network::{run_ablations, NetworkConfig, SkipMode, TrainConfig, Model};
use tofmpi::scenegen::{generate_scene, GenerationSpec, SceneFamily};
use tofmpi::sensor::{
    correlations_from_phasor, path_phase, CameraConfig, CorrelationSet, SPEED_OF_LIGHT,
};
use tofmpi::stats::{chi_squared, jensen_shannon_distance, js_max, pearson, Histogram};
use tofmpi::transport::{
    build_patches, deconvolve_oracle, simulate_prepared, transport_matrix, Bounces,
};

fn pass(n: usize, msg: &str) {
    println!("criterion {n:2}: PASS - {msg}");
}

/// f64 depth recovery straight from the correlation planes, bypassing the
/// f32 depth-map container.
fn depth_f64(corr: &CorrelationSet, px: usize, frequency: f64) -> f64 {
    let num = corr.planes[3][px] - corr.planes[1][px];
    let den = corr.planes[0][px] - corr.planes[2][px];
    let mut phi = num.atan2(den);
    if phi < 0.0 {
        phi += 2.0 * std::f64::consts::PI;
    }
    SPEED_OF_LIGHT * phi / (4.0 * std::f64::consts::PI * frequency)
}

fn family_of(i: usize) -> SceneFamily {
    SceneFamily::ALL[i % SceneFamily::ALL.len()]
}

#[test]
fn criterion_01_direct_depth_fidelity() {
    let start = Instant::now();
    let cam = CameraConfig { width: 32, height: 32, ..CameraConfig::default() };
    let mut max_err = 0.0f64;
    let mut scenes = 0;
    for i in 0..50 {
        let scene = generate_scene(family_of(i), 1000 + i as u64);
        let patches = build_patches(&scene, &cam, 1).unwrap();
        let transport = transport_matrix(&patches, &scene.quads, &cam).unwrap();
        let sim = simulate_prepared(&patches, transport, &cam, Bounces::Finite(1)).unwrap();
        for p in &patches.patches {
            let Some(px) = p.owner_pixel else { continue };
            let err = (depth_f64(&sim.correlations, px, cam.modulation_frequency) - p.cam_distance).abs();
            max_err = max_err.max(err);
        }
        scenes += 1;
    }
    assert!(max_err < 1e-9, "criterion 1: max error {max_err} m over {scenes} scenes");
    let dt = start.elapsed();
    assert!(dt.as_secs() < 60, "criterion 1: took {dt:?}");
    pass(1, &format!("single-bounce depth exact to {max_err:.2e} m over {scenes} scenes in {dt:.1?}"));
}

#[test]
fn criterion_02_unambiguous_range() {
    let f = 20e6;
    let range = SPEED_OF_LIGHT / (2.0 * f);
    assert!((range - 7.4948).abs() < 1e-4, "criterion 2: range constant {range}");
    let mut worst = 0.0f64;
    for k in 0..40 {
        let d = 0.3 + 0.17 * k as f64;
        let a = Complex64::from_polar(1.0, path_phase(2.0 * d, f));
        let b = Complex64::from_polar(1.0, path_phase(2.0 * (d + range), f));
        let ca = correlations_from_phasor(&[a], 1, 1);
        let cb = correlations_from_phasor(&[b], 1, 1);
        for i in 0..4 {
            worst = worst.max((ca.planes[i][0] - cb.planes[i][0]).abs());
        }
    }
    assert!(worst < 1e-12, "criterion 2: correlations differ by {worst}");
    pass(2, &format!("wrap constant {range:.6} m; d vs d+range correlations agree to {worst:.2e}"));
}

#[test]
fn criterion_03_deconvolution_oracle() {
    let start = Instant::now();
    let cam = CameraConfig { width: 16, height: 16, ..CameraConfig::default() };
    let mut max_err = 0.0f64;
    for i in 0..10 {
        let scene = generate_scene(family_of(i), 2000 + i as u64);
        let patches = build_patches(&scene, &cam, 1).unwrap();
        let transport = transport_matrix(&patches, &scene.quads, &cam).unwrap();
        let sim = simulate_prepared(&patches, transport, &cam, Bounces::Infinite).unwrap();
        let clean = deconvolve_oracle(&sim.correlations, &sim.transport, &cam).unwrap();
        for p in &patches.patches {
            let Some(px) = p.owner_pixel else { continue };
            let err = (depth_f64(&clean, px, cam.modulation_frequency) - p.cam_distance).abs();
            max_err = max_err.max(err);
        }
    }
    assert!(max_err < 1e-6, "criterion 3: max error {max_err} m");
    let dt = start.elapsed();
    assert!(dt.as_secs() < 120, "criterion 3: took {dt:?}");
    pass(3, &format!("deconvolved depth exact to {max_err:.2e} m over 10 scenes in {dt:.1?}"));
}

#[test]
fn criterion_04_two_return_spot_check() {
    let f = 20e6;
    // Independent oracle: straight complex arithmetic.
    let s = Complex64::from_polar(1.0, path_phase(4.0, f))
        + Complex64::from_polar(0.3, path_phase(5.0, f));
    let oracle = SPEED_OF_LIGHT * s.arg().rem_euclid(2.0 * std::f64::consts::PI)
        / (4.0 * std::f64::consts::PI * f);
    // Pipeline path through the correlation model.
    let corr = correlations_from_phasor(&[s], 1, 1);
    let measured = depth_f64(&corr, 0, f);
    assert!((measured - 2.11).abs() < 0.01, "criterion 4: measured {measured} m");
    assert!((measured - oracle).abs() < 1e-12, "criterion 4: oracle {oracle} vs pipeline {measured}");
    pass(4, &format!("two-return depth {measured:.4} m (oracle {oracle:.4} m)"));
}

fn randn(rng: &mut impl rand::Rng, shape: &[usize]) -> NdArr<f64> {
    let n: usize = shape.iter().product();
    NdArr::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn conv_naive(x: &NdArr<f64>, w: &NdArr<f64>, stride: usize, pad: usize) -> NdArr<f64> {
    let (n, ci, h, iw) = x.dims4();
    let (co, _, kh, kw) = w.dims4();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (iw + 2 * pad - kw) / stride + 1;
    let mut out = NdArr::zeros(&[n, co, oh, ow]);
    for i in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= iw as isize {
                                    continue;
                                }
                                acc += x.data[((i * ci + c) * h + iy as usize) * iw + ix as usize]
                                    * w.data[((o * ci + c) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out.data[((i * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Central finite differences on a scalar-valued graph builder.
fn fdiff_check<F>(seed: u64, shapes: &[Vec<usize>], build: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> TensorId,
{
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let leaves: Vec<NdArr<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
    let mut g: Graph<f64> = Graph::new();
    let ids: Vec<TensorId> = leaves.iter().map(|l| g.leaf(l.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    g.backward(loss).unwrap();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(ids[li]).expect("missing gradient").clone();
        for k in 0..leaf.numel() {
            let eval = |v: f64| {
                let mut g2: Graph<f64> = Graph::new();
                let ids2: Vec<TensorId> = leaves
                    .iter()
                    .enumerate()
                    .map(|(j, l)| {
                        let mut l = l.clone();
                        if j == li {
                            l.data[k] = v;
                        }
                        g2.leaf(l, false)
                    })
                    .collect();
                let out = build(&mut g2, &ids2);
                g2.value(out)
            };
            let x0 = leaf.data[k];
            let num = (eval(x0 + eps) - eval(x0 - eps)) / (2.0 * eps);
            let ana = analytic.data[k];
            let denom = num.abs().max(ana.abs()).max(1e-3);
            worst = worst.max((num - ana).abs() / denom);
        }
    }
    worst
}

#[test]
fn criterion_05_gradient_suite() {
    use rand::SeedableRng;
    let start = Instant::now();
    // Convolution against the quadruple-loop oracle on shapes <= 8x8.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    let mut conv_worst = 0.0f64;
    for &(n, ci, co, side, k, stride, pad) in &[
        (1usize, 1usize, 1usize, 4usize, 3usize, 1usize, 1usize),
        (2, 3, 4, 8, 5, 1, 2),
        (2, 2, 3, 8, 5, 2, 2),
        (1, 4, 2, 7, 3, 2, 1),
    ] {
        let x = randn(&mut rng, &[n, ci, side, side]);
        let w = randn(&mut rng, &[co, ci, k, k]);
        let expect = conv_naive(&x, &w, stride, pad);
        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x, false);
        let wi = g.leaf(w, false);
        let y = g.conv2d(xi, wi, None, stride, pad).unwrap();
        for (a, b) in g.data(y).data.iter().zip(&expect.data) {
            conv_worst = conv_worst.max((a - b).abs());
        }
    }
    assert!(conv_worst < 1e-12, "criterion 5: conv oracle error {conv_worst}");

    // Finite differences over every differentiable op, >= 20 seeds.
    let mut fd_worst = 0.0f64;
    let mut cases = 0usize;
    for seed in 0..7 {
        fd_worst = fd_worst.max(fdiff_check(seed, &[vec![1, 2, 6, 6], vec![2, 2, 3, 3], vec![2]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
            let r = g.relu(y);
            g.sum(r)
        }));
        cases += 1;
    }
    for seed in 10..15 {
        fd_worst = fd_worst.max(fdiff_check(seed, &[vec![1, 2, 8, 8], vec![2, 2, 5, 5]], |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 2, 2).unwrap();
            let f = g.kernel_flip(ids[1]);
            let z = g.conv2d(ids[0], f, None, 2, 2).unwrap();
            let s = g.add(y, z).unwrap();
            g.sum(s)
        }));
        cases += 1;
    }
    for seed in 20..25 {
        fd_worst = fd_worst.max(fdiff_check(seed, &[vec![2, 2, 3, 3], vec![2], vec![2]], |g, ids| {
            let u = g.upsample_nearest2x(ids[0]);
            let (bn, _, _) = g.batchnorm_train(u, 1e-5).unwrap();
            let sb = g.scale_bias(bn, ids[1], ids[2]).unwrap();
            let r = g.relu(sb);
            g.sum(r)
        }));
        cases += 1;
    }
    for seed in 30..35 {
        fd_worst = fd_worst.max(fdiff_check(seed, &[vec![1, 2, 4, 4], vec![1, 2, 4, 4]], |g, ids| {
            let m = g.mul(ids[0], ids[1]).unwrap();
            let cat = g.concat_channels(m, ids[0]).unwrap();
            let target = g.leaf(NdArr::zeros(&[1, 4, 4, 4]), false);
            let mask = g.leaf(
                NdArr::from_vec(&[1, 4, 4, 4], (0..64).map(|i| (i % 4 != 0) as u8 as f64).collect()),
                false,
            );
            g.mse_masked(cat, target, mask).unwrap()
        }));
        cases += 1;
    }
    assert!(cases >= 20, "criterion 5: only {cases} cases");
    assert!(fd_worst < 1e-4, "criterion 5: finite-difference error {fd_worst}");
    let dt = start.elapsed();
    assert!(dt.as_secs() < 120, "criterion 5: took {dt:?}");
    pass(5, &format!("conv oracle {conv_worst:.1e}; fdiff {fd_worst:.1e} over {cases} cases in {dt:.1?}"));
}

#[test]
fn criterion_06_architecture_shape_law() {
    let cfg = NetworkConfig::default();
    assert_eq!(cfg.scales, 6);
    assert_eq!(cfg.innermost_side(256), 8, "criterion 6: innermost side");
    let mut residual = Model::new(cfg.clone(), 0);
    let mut concat = Model::new(NetworkConfig { skip_mode: SkipMode::Concat, ..cfg }, 0);
    residual.tied_decoder = false;
    concat.tied_decoder = false;
    let base = residual.parameter_count() as f64;
    let ratio = (concat.parameter_count() as f64 - base) / base;
    assert!(
        (0.25..=0.35).contains(&ratio),
        "criterion 6: concat overhead {ratio:.3} outside [0.25, 0.35]"
    );
    pass(6, &format!("256 input -> 8x8 innermost; concat overhead {:.1}%", ratio * 100.0));
}

struct Desk {
    train: Vec<SamplePair>,
    test: Vec<SamplePair>,
}

fn desk_dataset() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("desk-dataset");
        let spec = GenerationSpec {
            seed: 7,
            families: SceneFamily::ALL.to_vec(),
            scenes_per_family: 2,
            albedo_variants_per_scene: 3,
            viewpoints_per_scene: 4,
            resolution: 64,
            bounce_count: 20,
            ..GenerationSpec::default()
        };
        assert!(spec.base_pair_count() >= 96);
        let entries = build_dataset(&spec, Bounces::Finite(20), &root, |_| {}).unwrap();
        assert_eq!(entries.len(), 96);
        let (train_e, test_e) = split_entries(&entries, 0.8, 7).unwrap();
        let train = augment_pairs(&load_pairs(&root, &train_e).unwrap());
        let test = augment_pairs(&load_pairs(&root, &test_e).unwrap());
        assert_eq!(train.len() % DIHEDRAL_VARIANTS, 0);
        Desk { train, test }
    })
}

const DESK_NET: NetworkConfig = NetworkConfig {
    scales: 3,
    base_channels: 8,
    max_channels: 32,
    kernel: 5,
    skip_mode: SkipMode::Residual,
};

fn desk_train_cfgs() -> (TrainConfig, TrainConfig) {
    let pretrain = TrainConfig { epochs: 12, batch_size: 16, seed: 7, ..TrainConfig::default() };
    let correct = TrainConfig {
        epochs: 4,
        batch_size: 16,
        learning_rate: 4e-4,
        lr_max: 1e-3,
        seed: 31,
        ..TrainConfig::default()
    };
    (pretrain, correct)
}

#[test]
fn criterion_07_two_stage_training_and_ablations() {
    let start = Instant::now();
    let desk = desk_dataset();
    let cam = CameraConfig { width: 64, height: 64, ..CameraConfig::default() };
    let (pre_cfg, cor_cfg) = desk_train_cfgs();
    let results = run_ablations(
        &DESK_NET,
        &desk.train,
        &desk.test,
        &pre_cfg,
        &cor_cfg,
        &cam,
        |arm, phase, e, l| println!("    [{arm}/{phase}] epoch {e}: {l:.5}"),
    )
    .unwrap();
    for r in &results {
        println!(
            "    arm {}: test MAE {:.4} (uncorrected {:.4}), {:.0}% improved, variance {:.3e}",
            r.name,
            r.test_mae,
            r.uncorrected_mae,
            r.fraction_improved * 100.0,
            r.per_image_variance()
        );
    }
    let by_name = |n: &str| results.iter().find(|r| r.name == n).unwrap();
    let reference = by_name("residual-pretrained");
    let concat = by_name("concat-pretrained");
    let scratch = by_name("residual-scratch");
    let noskip = by_name("no-skip-pretrained");

    assert!(
        reference.improvement >= 0.30,
        "criterion 7a: improvement {:.3} < 0.30 (MAE {:.4} vs {:.4})",
        reference.improvement,
        reference.test_mae,
        reference.uncorrected_mae
    );
    assert!(
        reference.fraction_improved >= 0.90,
        "criterion 7b: only {:.0}% of images improved",
        reference.fraction_improved * 100.0
    );
    assert!(
        reference.test_mae <= concat.test_mae,
        "criterion 7c: reference {:.4} > concat {:.4}",
        reference.test_mae,
        concat.test_mae
    );
    assert!(
        concat.test_mae <= scratch.test_mae && concat.test_mae <= noskip.test_mae,
        "criterion 7c: concat {:.4} vs scratch {:.4} / no-skip {:.4}",
        concat.test_mae,
        scratch.test_mae,
        noskip.test_mae
    );
    assert!(
        scratch.per_image_variance() > reference.per_image_variance(),
        "criterion 7c: scratch variance {:.3e} <= reference {:.3e}",
        scratch.per_image_variance(),
        reference.per_image_variance()
    );
    let dt = start.elapsed();
    pass(
        7,
        &format!(
            "MAE {:.4} -> {:.4} m ({:.0}% better, {:.0}% images; ordering holds) in {:.0?}",
            reference.uncorrected_mae,
            reference.test_mae,
            reference.improvement * 100.0,
            reference.fraction_improved * 100.0,
            dt
        ),
    );
}

fn synthetic_entries(scenes: usize, per_scene: usize) -> Vec<ManifestEntry> {
    (0..scenes)
        .flat_map(|s| {
            (0..per_scene).map(move |v| ManifestEntry {
                id: format!("scene{s}/v{v}"),
                base_scene: format!("scene{s}"),
                family: "corner".into(),
                input: String::new(),
                target: String::new(),
            })
        })
        .collect()
}

#[test]
fn criterion_08_dataset_bookkeeping() {
    let spec = GenerationSpec {
        families: vec![SceneFamily::Corner],
        scenes_per_family: 25,
        albedo_variants_per_scene: 6,
        viewpoints_per_scene: 7,
        ..GenerationSpec::default()
    };
    assert_eq!(spec.base_pair_count(), 1050, "criterion 8: base pair count");
    assert_eq!(spec.base_pair_count() * DIHEDRAL_VARIANTS, 8400, "criterion 8: augmented count");

    let entries = synthetic_entries(25, 42);
    let (train, test) = split_entries(&entries, 0.8, 11).unwrap();
    let train_scenes: std::collections::BTreeSet<_> = train.iter().map(|e| &e.base_scene).collect();
    let test_scenes: std::collections::BTreeSet<_> = test.iter().map(|e| &e.base_scene).collect();
    assert!(train_scenes.is_disjoint(&test_scenes), "criterion 8: scene overlap in split");

    // A 213-image validation subset augments to exactly 1704.
    let m = tofmpi::sensor::DepthMap::filled(4, 4, 1.0);
    let subset: Vec<SamplePair> = (0..213)
        .map(|i| SamplePair {
            id: format!("v{i}"),
            base_scene: format!("v{i}"),
            input: m.clone(),
            target: m.clone(),
        })
        .collect();
    assert_eq!(augment_pairs(&subset).len(), 1704, "criterion 8: 213 -> 1704");
    pass(8, "1050 base / 8400 augmented; split scene-disjoint; 213 -> 1704");
}

#[test]
fn criterion_09_metric_suite() {
    use rand::{Rng, SeedableRng};
    let mut h = Histogram::linear(0.0, 1.0, 32);
    for i in 0..1000 {
        h.add((i % 97) as f64 / 97.0);
    }
    h.normalize();
    assert_eq!(chi_squared(&h, &h).unwrap(), 0.0, "criterion 9: chi2 self");
    assert_eq!(jensen_shannon_distance(&h, &h).unwrap(), 0.0, "criterion 9: js self");
    assert_eq!(pearson(&h, &h).unwrap(), 1.0, "criterion 9: pearson self");

    let mut a = Histogram::linear(0.0, 1.0, 16);
    let mut b = Histogram::linear(0.0, 1.0, 16);
    for _ in 0..100 {
        a.add(0.1);
        b.add(0.9);
    }
    a.normalize();
    b.normalize();
    let js = jensen_shannon_distance(&a, &b).unwrap();
    assert!((js - 0.8326).abs() < 1e-4, "criterion 9: disjoint JS {js}");
    assert!((js_max() - (2f64.ln()).sqrt()).abs() < 1e-12);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mut p = Histogram::linear(0.0, 1.0, 24);
        let mut q = Histogram::linear(0.0, 1.0, 24);
        for _ in 0..300 {
            p.add(rng.gen_range(0.0..1.0));
            q.add(rng.gen_range(0.0..1.0));
        }
        p.normalize();
        q.normalize();
        let sym = |x: f64, y: f64| (x - y).abs() < 1e-12;
        assert!(sym(chi_squared(&p, &q).unwrap(), chi_squared(&q, &p).unwrap()));
        assert!(sym(
            jensen_shannon_distance(&p, &q).unwrap(),
            jensen_shannon_distance(&q, &p).unwrap()
        ));
        assert!(sym(pearson(&p, &q).unwrap(), pearson(&q, &p).unwrap()));
    }
    pass(9, "identity values exact; disjoint JS 0.8326; symmetric on 100 pairs");
}

#[test]
fn criterion_10_error_report_sanity() {
    let desk = desk_dataset();
    let all: Vec<&SamplePair> = desk.test.iter().collect();
    let measured: Vec<_> = all.iter().map(|p| p.input.clone()).collect();
    let truth: Vec<_> = all.iter().map(|p| p.target.clone()).collect();
    let cam = CameraConfig::default();
    let report = tofmpi::analysis::mpi_error_report(&measured, &truth, cam.unambiguous_range()).unwrap();
    let occupied: usize = report
        .bivariate
        .counts
        .iter()
        .filter(|v| **v > 0.0)
        .count();
    assert!(occupied > 10, "criterion 10: bivariate histogram nearly empty");
    assert!(
        report.mean_rel_error > 0.01 && report.mean_rel_error < 0.30,
        "criterion 10: mean relative error {:.4} outside (1%, 30%)",
        report.mean_rel_error
    );
    pass(
        10,
        &format!(
            "mean relative MPI error {:.1}% (literature reference point: {:.0}%)",
            report.mean_rel_error * 100.0,
            tofmpi::analysis::REFERENCE_MEAN_REL_ERROR * 100.0
        ),
    );
}

#[test]
fn criterion_11_reproducibility() {
    use tofmpi::network::{save_checkpoint, train, Stage};
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR"));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>, Vec<u8>) {
        let dir = base.join(format!("repro-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        pool.install(|| {
            let spec = GenerationSpec {
                seed: 3,
                families: vec![SceneFamily::Corner, SceneFamily::Box],
                scenes_per_family: 2,
                albedo_variants_per_scene: 2,
                viewpoints_per_scene: 2,
                resolution: 16,
                bounce_count: 8,
                ..GenerationSpec::default()
            };
            let entries = build_dataset(&spec, Bounces::Finite(8), &dir, |_| {}).unwrap();
            let (train_e, _) = split_entries(&entries, 0.8, 3).unwrap();
            let pairs = augment_pairs(&load_pairs(&dir, &train_e).unwrap());
            let cfg = NetworkConfig {
                scales: 2,
                base_channels: 4,
                max_channels: 8,
                kernel: 3,
                skip_mode: SkipMode::Residual,
            };
            let t_cfg = TrainConfig { epochs: 2, batch_size: 8, seed: 3, ..TrainConfig::default() };
            let mut model = Model::new(cfg, 3);
            train(&mut model, &pairs, Stage::Pretrain, &t_cfg, |_, _| {}).unwrap();
            let r = train(&mut model, &pairs, Stage::Correct, &t_cfg, |_, _| {}).unwrap();
            save_checkpoint(&model, &dir.join("model.dtw")).unwrap();
            let mut csv = String::from("epoch,loss\n");
            for (e, l) in r.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{e},{l}\n"));
            }
            std::fs::write(dir.join("losses.csv"), &csv).unwrap();
        });
        (
            std::fs::read(dir.join("model.dtw")).unwrap(),
            std::fs::read(dir.join("losses.csv")).unwrap(),
            std::fs::read(dir.join("manifest.jsonl")).unwrap(),
        )
    };
    let a = run("a");
    let b = run("b");
    assert!(a.0 == b.0, "criterion 11: checkpoints differ");
    assert!(a.1 == b.1, "criterion 11: loss CSVs differ");
    assert!(a.2 == b.2, "criterion 11: manifests differ");
    pass(11, "single-thread pipeline byte-identical across two runs");
}
