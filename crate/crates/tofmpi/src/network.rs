//! Two-stage convolutional encoder-decoder for depth correction.
//!
//! Stage 1 pretrains the encoder as a tied-weight autoencoder on corrupted
//! depth; stage 2 freezes the encoder and trains a materialized decoder
//! against ground truth. Skip connections bridge matching scales.

use crate::autograd::{adam_step, AdamState, AutogradError, Graph, NdArr, TensorId};
use crate::dataset::SamplePair;
use crate::scenegen::stable_hash;
use crate::sensor::{CameraConfig, DepthMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DTW1";

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("no training samples")]
    EmptyDataset,
    #[error("input {w}x{h} is not divisible by the scale factor {f}")]
    Indivisible { w: usize, h: usize, f: usize },
    #[error("samples disagree in shape: {a_w}x{a_h} vs {b_w}x{b_h}")]
    MixedShapes { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
    #[error("checkpoint io: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("frozen encoder changed during stage 2")]
    EncoderDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    Residual,
    Concat,
    None,
}

impl std::str::FromStr for SkipMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "residual" => Ok(SkipMode::Residual),
            "concat" => Ok(SkipMode::Concat),
            "none" => Ok(SkipMode::None),
            other => Err(format!("unknown skip mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel: usize,
    pub skip_mode: SkipMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            scales: 6,
            base_channels: 16,
            max_channels: 256,
            kernel: 5,
            skip_mode: SkipMode::Residual,
        }
    }
}

impl NetworkConfig {
    /// Channel width at scale `s`: doubles per scale from the base, capped.
    pub fn channels(&self, s: usize) -> usize {
        (self.base_channels << s).min(self.max_channels)
    }

    /// Spatial side of the innermost scale for a square input.
    pub fn innermost_side(&self, input: usize) -> usize {
        input >> (self.scales - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: NdArr<f32>,
    pub trainable: bool,
    pub adam: AdamState<f32>,
}

#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
}

/// One conv unit: convolution, then batch norm with a learned per-channel
/// scale and bias, then ReLU. The output layer skips norm and activation.
#[derive(Debug, Clone)]
struct Layer {
    w: usize,
    bias: Option<usize>,
    gamma: Option<usize>,
    beta: Option<usize>,
    bn: Option<usize>,
    stride: usize,
    relu: bool,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetworkConfig,
    pub params: Vec<Param>,
    pub bn_stats: Vec<BnStats>,
    encoder: Vec<Layer>,
    decoder: Vec<Layer>,
    combiners: Vec<Layer>,
    /// Stage-1 mode: decoder kernels are flip-transposed encoder kernels.
    pub tied_decoder: bool,
    pub stage: u32,
    /// Hash of encoder weights when stage 2 began; 0 before that.
    pub stage1_hash: u64,
}

fn he_init(rng: &mut ChaCha8Rng, co: usize, ci: usize, k: usize) -> NdArr<f32> {
    let fan_in = (ci * k * k) as f64;
    let std = (2.0 / fan_in).sqrt();
    let n = co * ci * k * k;
    // Box-Muller pairs from a deterministic stream.
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std) as f32
        })
        .collect();
    NdArr::from_vec(&[co, ci, k, k], data)
}

impl Model {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6bu64);
        let mut m = Model {
            cfg: cfg.clone(),
            params: Vec::new(),
            bn_stats: Vec::new(),
            encoder: Vec::new(),
            decoder: Vec::new(),
            combiners: Vec::new(),
            tied_decoder: true,
            stage: 0,
            stage1_hash: 0,
        };
        let k = cfg.kernel;
        let s_count = cfg.scales;
        for s in 0..s_count {
            let c = cfg.channels(s);
            let c_prev = if s == 0 { 1 } else { cfg.channels(s - 1) };
            let stride = if s == 0 { 1 } else { 2 };
            let l1 = m.add_conv(&mut rng, &format!("enc{s}a"), c, c_prev, k, stride, true, true);
            m.encoder.push(l1);
            let l2 = m.add_conv(&mut rng, &format!("enc{s}b"), c, c, k, 1, true, true);
            m.encoder.push(l2);
        }
        // Decoder mirrors the encoder in reverse; the final layer emits the
        // depth plane with a plain bias.
        for s in (0..s_count).rev() {
            let c = cfg.channels(s);
            let c_prev = if s == 0 { 1 } else { cfg.channels(s - 1) };
            let l2 = m.add_conv(&mut rng, &format!("dec{s}b"), c, c, k, 1, true, true);
            m.decoder.push(l2);
            let is_output = s == 0;
            let l1 = m.add_conv(&mut rng, &format!("dec{s}a"), c_prev, c, k, 1, !is_output, !is_output);
            m.decoder.push(l1);
        }
        if cfg.skip_mode == SkipMode::Concat {
            for s in 0..s_count.saturating_sub(1) {
                let c = cfg.channels(s);
                let l = m.add_conv(&mut rng, &format!("cmb{s}"), c, 2 * c, k, 1, true, true);
                m.combiners.push(l);
            }
        }
        m
    }

    #[allow(clippy::too_many_arguments)]
    fn add_conv(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        co: usize,
        ci: usize,
        k: usize,
        stride: usize,
        bn: bool,
        relu: bool,
    ) -> Layer {
        let w = self.push_param(&format!("{name}.w"), he_init(rng, co, ci, k), true);
        if bn {
            let gamma = self.push_param(&format!("{name}.g"), NdArr::from_vec(&[co], vec![1.0; co]), true);
            let beta = self.push_param(&format!("{name}.b"), NdArr::zeros(&[co]), true);
            self.bn_stats.push(BnStats { mean: vec![0.0; co], var: vec![1.0; co] });
            Layer {
                w,
                bias: None,
                gamma: Some(gamma),
                beta: Some(beta),
                bn: Some(self.bn_stats.len() - 1),
                stride,
                relu,
            }
        } else {
            let bias = self.push_param(&format!("{name}.bias"), NdArr::zeros(&[co]), true);
            Layer { w, bias: Some(bias), gamma: None, beta: None, bn: None, stride, relu }
        }
    }

    fn push_param(&mut self, name: &str, value: NdArr<f32>, trainable: bool) -> usize {
        let shape = value.shape.clone();
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
            adam: AdamState::new(&shape),
        });
        self.params.len() - 1
    }

    /// Total learned scalars, counting each tied kernel once.
    pub fn parameter_count(&self) -> usize {
        let skip_decoder_w: Vec<usize> = if self.tied_decoder {
            self.decoder.iter().map(|l| l.w).collect()
        } else {
            Vec::new()
        };
        self.params
            .iter()
            .enumerate()
            .filter(|(i, _)| !skip_decoder_w.contains(i))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// FNV-1a over the encoder weight bytes; detects any encoder drift.
    pub fn encoder_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for l in &self.encoder {
            for idx in [Some(l.w), l.gamma, l.beta].into_iter().flatten() {
                for v in &self.params[idx].value.data {
                    eat(&v.to_le_bytes());
                }
            }
            if let Some(bi) = l.bn {
                for v in self.bn_stats[bi].mean.iter().chain(&self.bn_stats[bi].var) {
                    eat(&v.to_le_bytes());
                }
            }
        }
        h
    }

    /// Copies flip-transposed encoder kernels into the decoder and drops the
    /// tie. A pretrained encoder is frozen; without pretraining the whole
    /// network stays trainable.
    pub fn begin_stage2(&mut self) {
        let freeze = self.stage >= 1;
        if self.tied_decoder {
            let pairs: Vec<(usize, usize)> = self
                .decoder
                .iter()
                .enumerate()
                .map(|(j, l)| (l.w, self.encoder[self.encoder.len() - 1 - j].w))
                .collect();
            for (dst, src) in pairs {
                self.params[dst].value = flip_transpose(&self.params[src].value);
                let shape = self.params[dst].value.shape.clone();
                self.params[dst].adam = AdamState::new(&shape);
            }
            self.tied_decoder = false;
        }
        // Stage 2 predicts a correction on top of the input (the forward
        // pass adds the input back at the end), so the output head restarts
        // at zero and the first prediction is exactly the uncorrected depth.
        let out_layer = self.decoder.last().unwrap().clone();
        let shape = self.params[out_layer.w].value.shape.clone();
        self.params[out_layer.w].value = NdArr::zeros(&shape);
        self.params[out_layer.w].adam = AdamState::new(&shape);
        if let Some(bi) = out_layer.bias {
            let bshape = self.params[bi].value.shape.clone();
            self.params[bi].value = NdArr::zeros(&bshape);
            self.params[bi].adam = AdamState::new(&bshape);
        }
        if freeze {
            let frozen: Vec<usize> = self
                .encoder
                .iter()
                .flat_map(|l| [Some(l.w), l.gamma, l.beta, l.bias].into_iter().flatten())
                .collect();
            for i in frozen {
                self.params[i].trainable = false;
            }
            self.stage1_hash = self.encoder_hash();
        }
        self.stage = 2;
    }
}

/// Swaps kernel in/out channels and flips both spatial axes.
fn flip_transpose(w: &NdArr<f32>) -> NdArr<f32> {
    let (o, i, kh, kw) = w.dims4();
    let mut out = NdArr::zeros(&[i, o, kh, kw]);
    for oo in 0..o {
        for ii in 0..i {
            for ky in 0..kh {
                for kx in 0..kw {
                    out.data[((ii * o + oo) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                        w.data[((oo * i + ii) * kh + ky) * kw + kx];
                }
            }
        }
    }
    out
}

struct ForwardState {
    /// param index -> leaf id, for gradient pickup after backward.
    bindings: Vec<(usize, TensorId)>,
    /// bn stats index -> (batch mean, batch var) for running updates.
    bn_batches: Vec<(usize, Vec<f32>, Vec<f32>)>,
}

impl ForwardState {
    fn new() -> ForwardState {
        ForwardState { bindings: Vec::new(), bn_batches: Vec::new() }
    }

    /// One leaf per parameter per graph, so gradients from every use site
    /// (including tied decoder kernels) accumulate in one place.
    fn leaf(&mut self, g: &mut Graph<f32>, model: &Model, pi: usize, train: bool) -> TensorId {
        if let Some((_, id)) = self.bindings.iter().find(|(p, _)| *p == pi) {
            return *id;
        }
        let p = &model.params[pi];
        let id = g.leaf(p.value.clone(), train && p.trainable);
        self.bindings.push((pi, id));
        id
    }
}

fn apply_layer(
    model: &Model,
    g: &mut Graph<f32>,
    layer: &Layer,
    x: TensorId,
    w_override: Option<TensorId>,
    train: bool,
    st: &mut ForwardState,
) -> Result<TensorId, NetworkError> {
    let pad = model.cfg.kernel / 2;
    let w_id = match w_override {
        Some(id) => id,
        None => st.leaf(g, model, layer.w, train),
    };
    let b_id = layer.bias.map(|bi| st.leaf(g, model, bi, train));
    let mut y = g.conv2d(x, w_id, b_id, layer.stride, pad)?;
    if let Some(bn_idx) = layer.bn {
        // Frozen layers keep their running statistics even in training.
        let layer_trainable = w_override.is_some() || model.params[layer.w].trainable;
        let bn_train = train && layer_trainable;
        if bn_train {
            let (out, mean, var) = g.batchnorm_train(y, BN_EPS)?;
            st.bn_batches.push((bn_idx, mean, var));
            y = out;
        } else {
            let stats = &model.bn_stats[bn_idx];
            y = g.batchnorm_eval(y, &stats.mean, &stats.var, BN_EPS)?;
        }
        let (gi, bi) = (layer.gamma.unwrap(), layer.beta.unwrap());
        let gid = st.leaf(g, model, gi, train);
        let bid = st.leaf(g, model, bi, train);
        y = g.scale_bias(y, gid, bid)?;
    }
    if layer.relu {
        y = g.relu(y);
    }
    Ok(y)
}

/// Full forward pass. `use_skips` is off during stage-1 pretraining.
/// `global_residual` adds the input back onto the output, so stage 2 learns
/// a correction field rather than absolute depth.
fn forward(
    model: &Model,
    g: &mut Graph<f32>,
    x: TensorId,
    train: bool,
    use_skips: bool,
    global_residual: bool,
    st: &mut ForwardState,
) -> Result<TensorId, NetworkError> {
    let s_count = model.cfg.scales;
    let mut h = x;
    let mut scale_acts: Vec<TensorId> = Vec::with_capacity(s_count);
    for s in 0..s_count {
        h = apply_layer(model, g, &model.encoder[2 * s], h, None, train, st)?;
        h = apply_layer(model, g, &model.encoder[2 * s + 1], h, None, train, st)?;
        scale_acts.push(h);
    }
    for s in (0..s_count).rev() {
        let j2 = 2 * (s_count - 1 - s);
        let (w2, w1) = if model.tied_decoder {
            let id1 = st.leaf(g, model, model.encoder[2 * s].w, train);
            let id2 = st.leaf(g, model, model.encoder[2 * s + 1].w, train);
            (Some(g.kernel_flip(id2)), Some(g.kernel_flip(id1)))
        } else {
            (None, None)
        };
        h = apply_layer(model, g, &model.decoder[j2], h, w2, train, st)?;
        if s > 0 {
            h = g.upsample_nearest2x(h);
        }
        h = apply_layer(model, g, &model.decoder[j2 + 1], h, w1, train, st)?;
        if use_skips && s > 0 {
            // After the mirrored transition conv we are back at scale s-1.
            let enc = scale_acts[s - 1];
            match model.cfg.skip_mode {
                SkipMode::Residual => h = g.add(h, enc)?,
                SkipMode::Concat => {
                    let cat = g.concat_channels(h, enc)?;
                    h = apply_layer(model, g, &model.combiners[s - 1], cat, None, train, st)?;
                }
                SkipMode::None => {}
            }
        }
    }
    if global_residual {
        h = g.add(h, x)?;
    }
    Ok(h)
}

/// Depth maps to a [n,1,h,w] tensor; sentinels become zero with mask zero.
fn to_batch(maps: &[&DepthMap]) -> (NdArr<f32>, NdArr<f32>) {
    let (w, h) = (maps[0].width, maps[0].height);
    let n = maps.len();
    let mut x = NdArr::zeros(&[n, 1, h, w]);
    let mut mask = NdArr::zeros(&[n, 1, h, w]);
    for (i, m) in maps.iter().enumerate() {
        for (j, v) in m.values.iter().enumerate() {
            if *v >= 0.0 {
                x.data[i * h * w + j] = *v;
                mask.data[i * h * w + j] = 1.0;
            }
        }
    }
    (x, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Epochs without improvement before the learning rate halves.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            lr_min: 1e-5,
            lr_max: 1e-3,
            patience: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Correct,
}

fn check_shapes(pairs: &[SamplePair]) -> Result<(usize, usize), NetworkError> {
    let (w, h) = (pairs[0].input.width, pairs[0].input.height);
    for p in pairs {
        for m in [&p.input, &p.target] {
            if m.width != w || m.height != h {
                return Err(NetworkError::MixedShapes { a_w: w, a_h: h, b_w: m.width, b_h: m.height });
            }
        }
    }
    Ok((w, h))
}

/// Trains one stage. Stage 1 reconstructs the corrupted input through the
/// tied autoencoder with skips off; stage 2 regresses ground truth with the
/// encoder frozen and skips on.
pub fn train(
    model: &mut Model,
    pairs: &[SamplePair],
    stage: Stage,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainReport, NetworkError> {
    if pairs.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let (w, h) = check_shapes(pairs)?;
    let factor = 1usize << (model.cfg.scales - 1);
    if w % factor != 0 || h % factor != 0 {
        return Err(NetworkError::Indivisible { w, h, f: factor });
    }
    if stage == Stage::Correct && model.stage < 2 {
        model.begin_stage2();
    }
    if stage == Stage::Pretrain {
        model.stage = model.stage.max(1);
    }
    let use_skips = stage == Stage::Correct;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_61696e_u64);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut lr = cfg.learning_rate.clamp(cfg.lr_min, cfg.lr_max);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs: Vec<&DepthMap> = chunk.iter().map(|&i| &pairs[i].input).collect();
            let targets: Vec<&DepthMap> = chunk.iter().map(|&i| &pairs[i].target).collect();
            let (x, in_mask) = to_batch(&inputs);
            let (t, t_mask) = to_batch(&targets);
            let mut g: Graph<f32> = Graph::new();
            let xi = g.leaf(x, false);
            let mut st = ForwardState::new();
            let out = forward(model, &mut g, xi, true, use_skips, stage == Stage::Correct, &mut st)?;
            let (target_id, mask_id) = match stage {
                Stage::Pretrain => (xi, g.leaf(in_mask, false)),
                Stage::Correct => {
                    let joint = NdArr {
                        shape: in_mask.shape.clone(),
                        data: in_mask.data.iter().zip(&t_mask.data).map(|(a, b)| a * b).collect(),
                    };
                    (g.leaf(t, false), g.leaf(joint, false))
                }
            };
            let loss = g.mse_masked(out, target_id, mask_id)?;
            loss_sum += g.value(loss);
            batches += 1;
            g.backward(loss)?;
            // Ordered, deduplicated parameter update.
            let mut seen = vec![false; model.params.len()];
            for (pi, leaf) in &st.bindings {
                if seen[*pi] || !model.params[*pi].trainable {
                    continue;
                }
                seen[*pi] = true;
                if let Some(grad) = g.grad(*leaf) {
                    let p = &mut model.params[*pi];
                    adam_step(&mut p.value, grad, &mut p.adam, lr);
                }
            }
            for (bi, mean, var) in &st.bn_batches {
                let s = &mut model.bn_stats[*bi];
                for c in 0..s.mean.len() {
                    s.mean[c] = ((1.0 - BN_MOMENTUM) * s.mean[c] as f64 + BN_MOMENTUM * mean[c] as f64) as f32;
                    s.var[c] = ((1.0 - BN_MOMENTUM) * s.var[c] as f64 + BN_MOMENTUM * var[c] as f64) as f32;
                }
            }
        }
        let epoch_loss = loss_sum / batches.max(1) as f64;
        epoch_losses.push(epoch_loss);
        on_epoch(epoch, epoch_loss);
        if epoch_loss < best * (1.0 - 1e-4) {
            best = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr = (lr * 0.5).clamp(cfg.lr_min, cfg.lr_max);
                stale = 0;
            }
        }
    }
    Ok(TrainReport { epoch_losses, final_lr: lr })
}

/// Runs the network in eval mode over depth maps. Output is clamped to the
/// sensor's unambiguous range; sentinel pixels pass through unchanged, and
/// an all-sentinel map is returned as-is.
pub fn infer(
    model: &Model,
    maps: &[DepthMap],
    cam: &CameraConfig,
    batch: usize,
) -> Result<Vec<DepthMap>, NetworkError> {
    let range = cam.unambiguous_range() as f32;
    let mut out = Vec::with_capacity(maps.len());
    let mut idx = 0;
    while idx < maps.len() {
        let end = (idx + batch.max(1)).min(maps.len());
        let chunk: Vec<&DepthMap> = maps[idx..end]
            .iter()
            .filter(|m| m.valid_values().next().is_some())
            .collect();
        let results: Vec<DepthMap> = if chunk.is_empty() {
            Vec::new()
        } else {
            let (x, _) = to_batch(&chunk);
            let mut g: Graph<f32> = Graph::new();
            let xi = g.leaf(x, false);
            let mut st = ForwardState::new();
            let use_skips = model.cfg.skip_mode != SkipMode::None;
            let y = forward(model, &mut g, xi, false, use_skips, model.stage >= 2, &mut st)?;
            let data = g.data(y);
            let (_, _, h, w) = data.dims4();
            chunk
                .iter()
                .enumerate()
                .map(|(i, src)| {
                    let mut m = DepthMap::filled(w, h, crate::sensor::NO_HIT);
                    for j in 0..h * w {
                        if src.values[j] >= 0.0 {
                            m.values[j] = data.data[i * h * w + j].clamp(0.0, range);
                        }
                    }
                    m
                })
                .collect()
        };
        let mut it = results.into_iter();
        for m in &maps[idx..end] {
            if m.valid_values().next().is_some() {
                out.push(it.next().unwrap());
            } else {
                out.push(m.clone());
            }
        }
        idx = end;
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub name: String,
    pub skip_mode: SkipMode,
    pub pretrained: bool,
    pub test_mae: f64,
    pub uncorrected_mae: f64,
    pub improvement: f64,
    pub fraction_improved: f64,
    pub per_image_mae: Vec<f64>,
}

impl AblationResult {
    pub fn per_image_variance(&self) -> f64 {
        let n = self.per_image_mae.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.per_image_mae.iter().sum::<f64>() / n;
        self.per_image_mae.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / (n - 1.0)
    }
}

fn masked_mae(pred: &DepthMap, target: &DepthMap) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.values.iter().zip(&target.values) {
        if *p >= 0.0 && *t >= 0.0 {
            acc += (*p as f64 - *t as f64).abs();
            n += 1;
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// Trains one configuration end to end and evaluates on held-out pairs.
pub fn train_and_evaluate(
    name: &str,
    net_cfg: &NetworkConfig,
    train_pairs: &[SamplePair],
    test_pairs: &[SamplePair],
    pretrain_cfg: Option<&TrainConfig>,
    correct_cfg: &TrainConfig,
    cam: &CameraConfig,
    mut on_epoch: impl FnMut(&str, usize, f64),
) -> Result<(Model, AblationResult), NetworkError> {
    let mut model = Model::new(net_cfg.clone(), correct_cfg.seed);
    if let Some(p_cfg) = pretrain_cfg {
        train(&mut model, train_pairs, Stage::Pretrain, p_cfg, |e, l| on_epoch("pretrain", e, l))?;
    }
    train(&mut model, train_pairs, Stage::Correct, correct_cfg, |e, l| on_epoch("correct", e, l))?;
    let result = evaluate(name, &model, test_pairs, cam, pretrain_cfg.is_some())?;
    Ok((model, result))
}

pub fn evaluate(
    name: &str,
    model: &Model,
    test_pairs: &[SamplePair],
    cam: &CameraConfig,
    pretrained: bool,
) -> Result<AblationResult, NetworkError> {
    if test_pairs.is_empty() {
        return Err(NetworkError::EmptyDataset);
    }
    let inputs: Vec<DepthMap> = test_pairs.iter().map(|p| p.input.clone()).collect();
    let corrected = infer(model, &inputs, cam, 16)?;
    let mut mae = Vec::new();
    let mut base_mae = Vec::new();
    let mut improved = 0usize;
    for ((pair, fixed), raw) in test_pairs.iter().zip(&corrected).zip(&inputs) {
        let (Some(m_fixed), Some(m_raw)) =
            (masked_mae(fixed, &pair.target), masked_mae(raw, &pair.target))
        else {
            continue;
        };
        mae.push(m_fixed);
        base_mae.push(m_raw);
        if m_fixed < m_raw {
            improved += 1;
        }
    }
    let test_mae = mae.iter().sum::<f64>() / mae.len() as f64;
    let uncorrected_mae = base_mae.iter().sum::<f64>() / base_mae.len() as f64;
    Ok(AblationResult {
        name: name.to_string(),
        skip_mode: model.cfg.skip_mode,
        pretrained,
        test_mae,
        uncorrected_mae,
        improvement: 1.0 - test_mae / uncorrected_mae,
        fraction_improved: improved as f64 / mae.len() as f64,
        per_image_mae: mae,
    })
}

/// The four ablation arms: reference (residual skips, pretrained), concat
/// skips, no pretraining, and no skips. All share the seed and epoch
/// budgets, so differences come from the architecture choices alone.
pub fn run_ablations(
    base_cfg: &NetworkConfig,
    train_pairs: &[SamplePair],
    test_pairs: &[SamplePair],
    pretrain_cfg: &TrainConfig,
    correct_cfg: &TrainConfig,
    cam: &CameraConfig,
    mut on_epoch: impl FnMut(&str, &str, usize, f64),
) -> Result<Vec<AblationResult>, NetworkError> {
    let arms: [(&str, SkipMode, bool); 4] = [
        ("residual-pretrained", SkipMode::Residual, true),
        ("concat-pretrained", SkipMode::Concat, true),
        ("residual-scratch", SkipMode::Residual, false),
        ("no-skip-pretrained", SkipMode::None, true),
    ];
    // Stage 1 runs with skips off and never touches the combiners, so it is
    // identical across arms; pretrain once and copy into each pretrained arm.
    // Pretrained arms initialize from the pretrain seed so stage 1 does not
    // depend on the stage-2 configuration.
    let mut pre_model =
        Model::new(NetworkConfig { skip_mode: SkipMode::None, ..base_cfg.clone() }, pretrain_cfg.seed);
    train(&mut pre_model, train_pairs, Stage::Pretrain, pretrain_cfg, |e, l| {
        on_epoch("shared", "pretrain", e, l)
    })?;
    let mut results = Vec::new();
    for (name, skip, pre) in arms {
        let cfg = NetworkConfig { skip_mode: skip, ..base_cfg.clone() };
        let seed = if pre { pretrain_cfg.seed } else { correct_cfg.seed };
        let mut model = Model::new(cfg, seed);
        if pre {
            // Encoder and decoder params precede the combiners, so the
            // shared prefix is index-aligned across skip modes.
            for (i, src) in pre_model.params.iter().enumerate() {
                debug_assert_eq!(model.params[i].name, src.name);
                model.params[i] = src.clone();
            }
            for (dst, src) in model.bn_stats.iter_mut().zip(&pre_model.bn_stats) {
                *dst = src.clone();
            }
            model.stage = pre_model.stage;
        }
        train(&mut model, train_pairs, Stage::Correct, correct_cfg, |e, l| {
            on_epoch(name, "correct", e, l)
        })?;
        if pre && model.encoder_hash() != model.stage1_hash {
            return Err(NetworkError::EncoderDrift);
        }
        results.push(evaluate(name, &model, test_pairs, cam, pre)?);
    }
    Ok(results)
}

fn write_record(f: &mut impl Write, name: &str, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    f.write_all(&(name.len() as u32).to_le_bytes())?;
    f.write_all(name.as_bytes())?;
    f.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        f.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Saves every parameter, optimizer moment, and batch-norm statistic, plus
/// stage provenance, as named tensors.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), NetworkError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    let meta = vec![
        model.stage as f32,
        if model.tied_decoder { 1.0 } else { 0.0 },
        model.cfg.scales as f32,
        model.cfg.base_channels as f32,
        model.cfg.max_channels as f32,
        model.cfg.kernel as f32,
        match model.cfg.skip_mode {
            SkipMode::Residual => 0.0,
            SkipMode::Concat => 1.0,
            SkipMode::None => 2.0,
        },
        // Hash stored as four 16-bit chunks, each exact in f32.
        ((model.stage1_hash >> 48) & 0xffff) as f32,
        ((model.stage1_hash >> 32) & 0xffff) as f32,
        ((model.stage1_hash >> 16) & 0xffff) as f32,
        (model.stage1_hash & 0xffff) as f32,
    ];
    write_record(&mut f, "!meta", &[meta.len()], &meta)?;
    for p in &model.params {
        write_record(&mut f, &p.name, &p.value.shape, &p.value.data)?;
        write_record(&mut f, &format!("!adam.{}.m", p.name), &p.adam.m.shape, &p.adam.m.data)?;
        write_record(&mut f, &format!("!adam.{}.v", p.name), &p.adam.v.shape, &p.adam.v.data)?;
        write_record(&mut f, &format!("!adam.{}.t", p.name), &[1], &[p.adam.step as f32])?;
        write_record(
            &mut f,
            &format!("!train.{}", p.name),
            &[1],
            &[if p.trainable { 1.0 } else { 0.0 }],
        )?;
    }
    for (i, s) in model.bn_stats.iter().enumerate() {
        write_record(&mut f, &format!("!bn.{i}.mean"), &[s.mean.len()], &s.mean)?;
        write_record(&mut f, &format!("!bn.{i}.var"), &[s.var.len()], &s.var)?;
    }
    Ok(())
}

fn read_record(f: &mut impl Read) -> Result<Option<(String, Vec<usize>, Vec<f32>)>, NetworkError> {
    let mut len4 = [0u8; 4];
    match f.read_exact(&mut len4) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let name_len = u32::from_le_bytes(len4) as usize;
    if name_len > 4096 {
        return Err(NetworkError::BadCheckpoint(format!("name length {name_len}")));
    }
    let mut name = vec![0u8; name_len];
    f.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| NetworkError::BadCheckpoint(e.to_string()))?;
    f.read_exact(&mut len4)?;
    let rank = u32::from_le_bytes(len4) as usize;
    if rank > 8 {
        return Err(NetworkError::BadCheckpoint(format!("rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        f.read_exact(&mut len4)?;
        dims.push(u32::from_le_bytes(len4) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = vec![0f32; n];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        f.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok(Some((name, dims, data)))
}

/// Restores a model saved by [`save_checkpoint`]. The architecture is
/// rebuilt from the stored configuration, then every tensor is overwritten.
pub fn load_checkpoint(path: &Path) -> Result<Model, NetworkError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetworkError::BadCheckpoint("bad magic".into()));
    }
    let Some((name, _, meta)) = read_record(&mut f)? else {
        return Err(NetworkError::BadCheckpoint("empty file".into()));
    };
    if name != "!meta" || meta.len() < 11 {
        return Err(NetworkError::BadCheckpoint("missing meta record".into()));
    }
    let cfg = NetworkConfig {
        scales: meta[2] as usize,
        base_channels: meta[3] as usize,
        max_channels: meta[4] as usize,
        kernel: meta[5] as usize,
        skip_mode: match meta[6] as u32 {
            0 => SkipMode::Residual,
            1 => SkipMode::Concat,
            _ => SkipMode::None,
        },
    };
    let mut model = Model::new(cfg, 0);
    model.stage = meta[0] as u32;
    model.tied_decoder = meta[1] != 0.0;
    model.stage1_hash = ((meta[7] as u64) << 48)
        | ((meta[8] as u64) << 32)
        | ((meta[9] as u64) << 16)
        | meta[10] as u64;
    use std::collections::HashMap;
    let mut index: HashMap<String, usize> =
        model.params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
    while let Some((name, dims, data)) = read_record(&mut f)? {
        if let Some(rest) = name.strip_prefix("!adam.") {
            let (pname, field) = rest
                .rsplit_once('.')
                .ok_or_else(|| NetworkError::BadCheckpoint(format!("bad record {name}")))?;
            let pi = *index
                .get(pname)
                .ok_or_else(|| NetworkError::BadCheckpoint(format!("unknown param {pname}")))?;
            match field {
                "m" => model.params[pi].adam.m = NdArr::from_vec(&dims, data),
                "v" => model.params[pi].adam.v = NdArr::from_vec(&dims, data),
                "t" => model.params[pi].adam.step = data[0] as u64,
                _ => return Err(NetworkError::BadCheckpoint(format!("bad field {field}"))),
            }
        } else if let Some(pname) = name.strip_prefix("!train.") {
            let pi = *index
                .get(pname)
                .ok_or_else(|| NetworkError::BadCheckpoint(format!("unknown param {pname}")))?;
            model.params[pi].trainable = data[0] != 0.0;
        } else if let Some(rest) = name.strip_prefix("!bn.") {
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| NetworkError::BadCheckpoint(format!("bad record {name}")))?;
            let bi: usize =
                idx.parse().map_err(|_| NetworkError::BadCheckpoint(format!("bad index {idx}")))?;
            if bi >= model.bn_stats.len() {
                return Err(NetworkError::BadCheckpoint(format!("bn index {bi} out of range")));
            }
            match field {
                "mean" => model.bn_stats[bi].mean = data,
                "var" => model.bn_stats[bi].var = data,
                _ => return Err(NetworkError::BadCheckpoint(format!("bad field {field}"))),
            }
        } else {
            let pi = *index
                .get(&name)
                .ok_or_else(|| NetworkError::BadCheckpoint(format!("unknown param {name}")))?;
            if model.params[pi].value.shape != dims {
                return Err(NetworkError::BadCheckpoint(format!("shape mismatch for {name}")));
            }
            model.params[pi].value = NdArr::from_vec(&dims, data);
            index.insert(name, pi);
        }
    }
    Ok(model)
}

/// Seed helper tying a run id to a reproducible stream.
pub fn run_seed(tag: &str, seed: u64) -> u64 {
    seed ^ stable_hash(tag)
}
