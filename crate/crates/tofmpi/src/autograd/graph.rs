use super::{NdArr, Scalar};
use rayon::prelude::*;

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d { x: TensorId, w: TensorId, b: Option<TensorId>, stride: usize, pad: usize },
    KernelFlip { w: TensorId },
    Upsample2x { x: TensorId },
    BatchNormTrain { x: TensorId, inv_std: Vec<T>, x_hat_mean_cache: Vec<T> },
    BatchNormEval { x: TensorId, inv_std: Vec<T> },
    ScaleBias { x: TensorId, gamma: TensorId, beta: TensorId },
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    ConcatChannels { a: TensorId, b: TensorId },
    MseMasked { pred: TensorId, target: TensorId, mask: TensorId, count: f64 },
    Sum { x: TensorId },
}

#[derive(Debug)]
struct Node<T> {
    data: NdArr<T>,
    grad: Option<NdArr<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation tape. Node ids are a topological order.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn conv_out(n: usize, k: usize, pad: usize, stride: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// Unpacks one sample into the (Ci*kh*kw) x (OH*OW) patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T], ci: usize, h: usize, w: usize,
    kh: usize, kw: usize, pad: usize, stride: usize,
    oh: usize, ow: usize, cols: &mut [T],
) {
    let ohw = oh * ow;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for d in dst.iter_mut() {
                            *d = T::zero();
                        }
                        continue;
                    }
                    let src_row = c * h * w + iy as usize * w;
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds the patch-matrix gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T], ci: usize, h: usize, w: usize,
    kh: usize, kw: usize, pad: usize, stride: usize,
    oh: usize, ow: usize, dx: &mut [T],
) {
    let ohw = oh * ow;
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = c * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_row + ix as usize] = dx[dst_row + ix as usize] + cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, data: NdArr<T>, op: Op<T>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node { data, grad: None, op, needs_grad });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: NdArr<T>, requires_grad: bool) -> TensorId {
        self.push(data, Op::Leaf, requires_grad)
    }

    pub fn data(&self, id: TensorId) -> &NdArr<T> {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&NdArr<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// 2-D convolution (cross-correlation convention) with zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, AutogradError> {
        assert!(stride == 1 || stride == 2, "stride must be 1 or 2");
        let (n, ci, h, iw) = self.data(x).dims4();
        let (co, wci, kh, kw) = self.data(w).dims4();
        if ci != wci {
            return Err(AutogradError::ChannelMismatch { input: ci, kernel: wci });
        }
        if let Some(b) = b {
            if self.data(b).shape != [co] {
                return Err(AutogradError::ShapeMismatch {
                    a: self.data(b).shape.clone(),
                    b: vec![co],
                });
            }
        }
        let oh = conv_out(h, kh, pad, stride);
        let ow = conv_out(iw, kw, pad, stride);
        let ohw = oh * ow;
        let ckk = ci * kh * kw;
        let mut out = NdArr::zeros(&[n, co, oh, ow]);
        let x_data = &self.nodes[x.0].data.data;
        let w_data = &self.nodes[w.0].data.data;
        let b_data = b.map(|b| self.nodes[b.0].data.data.clone());
        out.data
            .par_chunks_mut(co * ohw)
            .enumerate()
            .for_each(|(i, out_i)| {
                let mut cols = vec![T::zero(); ckk * ohw];
                im2col(&x_data[i * ci * h * iw..(i + 1) * ci * h * iw], ci, h, iw, kh, kw, pad, stride, oh, ow, &mut cols);
                T::gemm(co, ckk, ohw, T::one(), w_data, ckk as isize, 1, &cols, ohw as isize, 1, T::zero(), out_i);
                if let Some(bd) = &b_data {
                    for c in 0..co {
                        let bv = bd[c];
                        for v in out_i[c * ohw..(c + 1) * ohw].iter_mut() {
                            *v = *v + bv;
                        }
                    }
                }
            });
        let needs = self.needs(&[x, w]) || b.map_or(false, |b| self.nodes[b.0].needs_grad);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs))
    }

    /// Swaps the in/out axes of a conv kernel and flips it spatially, so an
    /// encoder kernel can serve as its mirrored (tied) decoder kernel.
    pub fn kernel_flip(&mut self, w: TensorId) -> TensorId {
        let (o, i, kh, kw) = self.data(w).dims4();
        let src = &self.nodes[w.0].data.data;
        let mut out = NdArr::zeros(&[i, o, kh, kw]);
        for oo in 0..o {
            for ii in 0..i {
                for ky in 0..kh {
                    for kx in 0..kw {
                        out.data[((ii * o + oo) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                            src[((oo * i + ii) * kh + ky) * kw + kx];
                    }
                }
            }
        }
        let needs = self.nodes[w.0].needs_grad;
        self.push(out, Op::KernelFlip { w }, needs)
    }

    /// Nearest-neighbor 2x upsampling; the gradient sums each 2x2 block.
    pub fn upsample_nearest2x(&mut self, x: TensorId) -> TensorId {
        let (n, c, h, w) = self.data(x).dims4();
        let src = &self.nodes[x.0].data.data;
        let mut out = NdArr::zeros(&[n, c, 2 * h, 2 * w]);
        for img in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    let v = src[img * h * w + y * w + xx];
                    let base = img * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                    out.data[base] = v;
                    out.data[base + 1] = v;
                    out.data[base + 2 * w] = v;
                    out.data[base + 2 * w + 1] = v;
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, Op::Upsample2x { x }, needs)
    }

    /// Train-mode batch normalization with batch statistics; returns the
    /// output id plus the per-channel batch mean and (biased) variance so
    /// the caller can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<T>, Vec<T>), AutogradError> {
        let (n, c, h, w) = self.data(x).dims4();
        let m = (n * h * w) as f64;
        let src = &self.nodes[x.0].data.data;
        let hw = h * w;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut acc = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for v in &src[base..base + hw] {
                    acc += v.as_f64();
                }
            }
            let mu = acc / m;
            let mut vacc = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for v in &src[base..base + hw] {
                    let d = v.as_f64() - mu;
                    vacc += d * d;
                }
            }
            mean[ch] = T::from_f64(mu);
            var[ch] = T::from_f64(vacc / m);
        }
        let inv_std: Vec<T> =
            var.iter().map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let mut out = NdArr::zeros(&[n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in 0..hw {
                    out.data[base + k] = (src[base + k] - mean[ch]) * inv_std[ch];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        let id = self.push(
            out,
            Op::BatchNormTrain { x, inv_std: inv_std.clone(), x_hat_mean_cache: mean.clone() },
            needs,
        );
        Ok((id, mean, var))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: TensorId,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<TensorId, AutogradError> {
        let (n, c, h, w) = self.data(x).dims4();
        if running_mean.len() != c || running_var.len() != c {
            return Err(AutogradError::ShapeMismatch {
                a: vec![running_mean.len()],
                b: vec![c],
            });
        }
        let inv_std: Vec<T> =
            running_var.iter().map(|v| T::from_f64(1.0 / (v.as_f64() + eps).sqrt())).collect();
        let hw = h * w;
        let src = &self.nodes[x.0].data.data;
        let mut out = NdArr::zeros(&[n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in 0..hw {
                    out.data[base + k] = (src[base + k] - running_mean[ch]) * inv_std[ch];
                }
            }
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(out, Op::BatchNormEval { x, inv_std }, needs))
    }

    /// Per-channel affine: y = x * gamma[c] + beta[c].
    pub fn scale_bias(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId, AutogradError> {
        let (n, c, h, w) = self.data(x).dims4();
        if self.data(gamma).shape != [c] || self.data(beta).shape != [c] {
            return Err(AutogradError::ShapeMismatch {
                a: self.data(gamma).shape.clone(),
                b: vec![c],
            });
        }
        let hw = h * w;
        let src = &self.nodes[x.0].data.data;
        let g = &self.nodes[gamma.0].data.data;
        let bt = &self.nodes[beta.0].data.data;
        let mut out = NdArr::zeros(&[n, c, h, w]);
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for k in 0..hw {
                    out.data[base + k] = src[base + k] * g[ch] + bt[ch];
                }
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(out, Op::ScaleBias { x, gamma, beta }, needs))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data = NdArr {
            shape: self.data(x).shape.clone(),
            data: self.nodes[x.0].data.data.iter().map(|&v| v.max(T::zero())).collect(),
        };
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, Op::Relu { x }, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        if self.data(a).shape != self.data(b).shape {
            return Err(AutogradError::ShapeMismatch {
                a: self.data(a).shape.clone(),
                b: self.data(b).shape.clone(),
            });
        }
        let data = NdArr {
            shape: self.data(a).shape.clone(),
            data: self.nodes[a.0]
                .data
                .data
                .iter()
                .zip(&self.nodes[b.0].data.data)
                .map(|(&x, &y)| x + y)
                .collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        if self.data(a).shape != self.data(b).shape {
            return Err(AutogradError::ShapeMismatch {
                a: self.data(a).shape.clone(),
                b: self.data(b).shape.clone(),
            });
        }
        let data = NdArr {
            shape: self.data(a).shape.clone(),
            data: self.nodes[a.0]
                .data
                .data
                .iter()
                .zip(&self.nodes[b.0].data.data)
                .map(|(&x, &y)| x * y)
                .collect(),
        };
        let needs = self.needs(&[a, b]);
        Ok(self.push(data, Op::Mul { a, b }, needs))
    }

    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutogradError> {
        let (n, ca, h, w) = self.data(a).dims4();
        let (nb, cb, hb, wb) = self.data(b).dims4();
        if n != nb || h != hb || w != wb {
            return Err(AutogradError::ShapeMismatch {
                a: self.data(a).shape.clone(),
                b: self.data(b).shape.clone(),
            });
        }
        let hw = h * w;
        let mut out = NdArr::zeros(&[n, ca + cb, h, w]);
        let sa = &self.nodes[a.0].data.data;
        let sb = &self.nodes[b.0].data.data;
        for i in 0..n {
            let dst = (i * (ca + cb)) * hw;
            out.data[dst..dst + ca * hw].copy_from_slice(&sa[i * ca * hw..(i + 1) * ca * hw]);
            out.data[dst + ca * hw..dst + (ca + cb) * hw]
                .copy_from_slice(&sb[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, Op::ConcatChannels { a, b }, needs))
    }

    /// Mean squared error over pixels where mask > 0.5. Returns 0 for an
    /// all-masked input.
    pub fn mse_masked(
        &mut self,
        pred: TensorId,
        target: TensorId,
        mask: TensorId,
    ) -> Result<TensorId, AutogradError> {
        for other in [target, mask] {
            if self.data(pred).shape != self.data(other).shape {
                return Err(AutogradError::ShapeMismatch {
                    a: self.data(pred).shape.clone(),
                    b: self.data(other).shape.clone(),
                });
            }
        }
        let p = &self.nodes[pred.0].data.data;
        let t = &self.nodes[target.0].data.data;
        let m = &self.nodes[mask.0].data.data;
        let mut acc = 0.0f64;
        let mut count = 0.0f64;
        for i in 0..p.len() {
            if m[i].as_f64() > 0.5 {
                let d = p[i].as_f64() - t[i].as_f64();
                acc += d * d;
                count += 1.0;
            }
        }
        let loss = if count > 0.0 { acc / count } else { 0.0 };
        let needs = self.needs(&[pred]);
        Ok(self.push(
            NdArr::scalar(T::from_f64(loss)),
            Op::MseMasked { pred, target, mask, count },
            needs,
        ))
    }

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: T = self.nodes[x.0].data.data.iter().copied().sum();
        let needs = self.nodes[x.0].needs_grad;
        self.push(NdArr::scalar(s), Op::Sum { x }, needs)
    }

    pub fn value(&self, id: TensorId) -> f64 {
        self.nodes[id.0].data.data[0].as_f64()
    }

    fn grad_or_zero(&mut self, id: TensorId) -> &mut NdArr<T> {
        let shape = self.nodes[id.0].data.shape.clone();
        self.nodes[id.0].grad.get_or_insert_with(|| NdArr::zeros(&shape))
    }

    /// Reverse sweep from a scalar loss; gradients accumulate into every
    /// reachable node with `needs_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutogradError> {
        if self.nodes[loss.0].data.numel() != 1 {
            return Err(AutogradError::NonScalarLoss {
                shape: self.nodes[loss.0].data.shape.clone(),
            });
        }
        // Seed; local gradient buffers per node, consumed in reverse order.
        let n = self.nodes.len();
        let mut grads: Vec<Option<NdArr<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(NdArr::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            // Record into the node's persistent grad accumulator.
            {
                let slot = self.grad_or_zero(TensorId(idx));
                for (a, b) in slot.data.iter_mut().zip(&gy.data) {
                    *a = *a + *b;
                }
            }
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.backward_conv(x, w, b, stride, pad, &gy, &mut grads);
                }
                Op::KernelFlip { w } => {
                    let (i, o, kh, kw) = self.data(TensorId(idx)).dims4();
                    let mut dw = NdArr::zeros(&[o, i, kh, kw]);
                    for ii in 0..i {
                        for oo in 0..o {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    dw.data[((oo * i + ii) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)] =
                                        gy.data[((ii * o + oo) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    add_local(&mut grads, w, dw, &self.nodes);
                }
                Op::Upsample2x { x } => {
                    let (n, c, h, w2) = self.data(x).dims4();
                    let mut dx = NdArr::zeros(&[n, c, h, w2]);
                    for img in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w2 {
                                let base = img * 4 * h * w2 + 2 * y * 2 * w2 + 2 * xx;
                                dx.data[img * h * w2 + y * w2 + xx] = gy.data[base]
                                    + gy.data[base + 1]
                                    + gy.data[base + 2 * w2]
                                    + gy.data[base + 2 * w2 + 1];
                            }
                        }
                    }
                    add_local(&mut grads, x, dx, &self.nodes);
                }
                Op::BatchNormTrain { x, inv_std, x_hat_mean_cache: mean } => {
                    let (n, c, h, w2) = self.data(x).dims4();
                    let hw = h * w2;
                    let m = (n * hw) as f64;
                    let xs = &self.nodes[x.0].data.data;
                    let mut dx = NdArr::zeros(&[n, c, h, w2]);
                    for ch in 0..c {
                        let mu = mean[ch].as_f64();
                        let istd = inv_std[ch].as_f64();
                        let mut sum_dy = 0.0f64;
                        let mut sum_dy_xhat = 0.0f64;
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for k in 0..hw {
                                let dy = gy.data[base + k].as_f64();
                                let xhat = (xs[base + k].as_f64() - mu) * istd;
                                sum_dy += dy;
                                sum_dy_xhat += dy * xhat;
                            }
                        }
                        for i in 0..n {
                            let base = (i * c + ch) * hw;
                            for k in 0..hw {
                                let dy = gy.data[base + k].as_f64();
                                let xhat = (xs[base + k].as_f64() - mu) * istd;
                                let v = istd * (dy - sum_dy / m - xhat * sum_dy_xhat / m);
                                dx.data[base + k] = T::from_f64(v);
                            }
                        }
                    }
                    add_local(&mut grads, x, dx, &self.nodes);
                }
                Op::BatchNormEval { x, inv_std } => {
                    let (n, c, h, w2) = self.data(x).dims4();
                    let hw = h * w2;
                    let mut dx = NdArr::zeros(&[n, c, h, w2]);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for k in 0..hw {
                                dx.data[base + k] = gy.data[base + k] * inv_std[ch];
                            }
                        }
                    }
                    add_local(&mut grads, x, dx, &self.nodes);
                }
                Op::ScaleBias { x, gamma, beta } => {
                    let (n, c, h, w2) = self.data(x).dims4();
                    let hw = h * w2;
                    let xs = &self.nodes[x.0].data.data;
                    let g = &self.nodes[gamma.0].data.data;
                    let mut dx = NdArr::zeros(&[n, c, h, w2]);
                    let mut dg = NdArr::zeros(&[c]);
                    let mut db = NdArr::zeros(&[c]);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for k in 0..hw {
                                let dy = gy.data[base + k];
                                dx.data[base + k] = dy * g[ch];
                                dg.data[ch] = dg.data[ch] + dy * xs[base + k];
                                db.data[ch] = db.data[ch] + dy;
                            }
                        }
                    }
                    add_local(&mut grads, x, dx, &self.nodes);
                    add_local(&mut grads, gamma, dg, &self.nodes);
                    add_local(&mut grads, beta, db, &self.nodes);
                }
                Op::Relu { x } => {
                    let xs = &self.nodes[x.0].data.data;
                    let dx = NdArr {
                        shape: self.nodes[x.0].data.shape.clone(),
                        data: xs
                            .iter()
                            .zip(&gy.data)
                            .map(|(&xv, &dy)| if xv > T::zero() { dy } else { T::zero() })
                            .collect(),
                    };
                    add_local(&mut grads, x, dx, &self.nodes);
                }
                Op::Add { a, b } => {
                    add_local(&mut grads, a, gy.clone(), &self.nodes);
                    add_local(&mut grads, b, gy.clone(), &self.nodes);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].data.clone();
                    let bv = self.nodes[b.0].data.clone();
                    let da = NdArr {
                        shape: av.shape.clone(),
                        data: bv.data.iter().zip(&gy.data).map(|(&x, &d)| x * d).collect(),
                    };
                    let db = NdArr {
                        shape: av.shape.clone(),
                        data: av.data.iter().zip(&gy.data).map(|(&x, &d)| x * d).collect(),
                    };
                    add_local(&mut grads, a, da, &self.nodes);
                    add_local(&mut grads, b, db, &self.nodes);
                }
                Op::ConcatChannels { a, b } => {
                    let (n, ca, h, w2) = self.data(a).dims4();
                    let cb = self.data(b).shape[1];
                    let hw = h * w2;
                    let mut da = NdArr::zeros(&[n, ca, h, w2]);
                    let mut db = NdArr::zeros(&[n, cb, h, w2]);
                    for i in 0..n {
                        let src = (i * (ca + cb)) * hw;
                        da.data[i * ca * hw..(i + 1) * ca * hw]
                            .copy_from_slice(&gy.data[src..src + ca * hw]);
                        db.data[i * cb * hw..(i + 1) * cb * hw]
                            .copy_from_slice(&gy.data[src + ca * hw..src + (ca + cb) * hw]);
                    }
                    add_local(&mut grads, a, da, &self.nodes);
                    add_local(&mut grads, b, db, &self.nodes);
                }
                Op::MseMasked { pred, target, mask, count } => {
                    if count > 0.0 {
                        let scale = 2.0 / count * gy.data[0].as_f64();
                        let p = &self.nodes[pred.0].data;
                        let t = &self.nodes[target.0].data.data;
                        let m = &self.nodes[mask.0].data.data;
                        let dp = NdArr {
                            shape: p.shape.clone(),
                            data: (0..p.data.len())
                                .map(|i| {
                                    if m[i].as_f64() > 0.5 {
                                        T::from_f64(scale * (p.data[i].as_f64() - t[i].as_f64()))
                                    } else {
                                        T::zero()
                                    }
                                })
                                .collect(),
                        };
                        add_local(&mut grads, pred, dp, &self.nodes);
                    }
                }
                Op::Sum { x } => {
                    let dx = NdArr {
                        shape: self.nodes[x.0].data.shape.clone(),
                        data: vec![gy.data[0]; self.nodes[x.0].data.numel()],
                    };
                    add_local(&mut grads, x, dx, &self.nodes);
                }
            }
        }
        Ok(())
    }

    fn backward_conv(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
        gy: &NdArr<T>,
        grads: &mut [Option<NdArr<T>>],
    ) {
        let (n, ci, h, iw) = self.data(x).dims4();
        let (co, _, kh, kw) = self.data(w).dims4();
        let oh = conv_out(h, kh, pad, stride);
        let ow = conv_out(iw, kw, pad, stride);
        let ohw = oh * ow;
        let ckk = ci * kh * kw;
        let x_needs = self.nodes[x.0].needs_grad;
        let w_needs = self.nodes[w.0].needs_grad;
        let x_data = self.nodes[x.0].data.data.clone();
        let w_data = self.nodes[w.0].data.data.clone();
        // Per-sample work in parallel, reduced in fixed order.
        let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut cols = vec![T::zero(); ckk * ohw];
                im2col(&x_data[i * ci * h * iw..(i + 1) * ci * h * iw], ci, h, iw, kh, kw, pad, stride, oh, ow, &mut cols);
                let gy_i = &gy.data[i * co * ohw..(i + 1) * co * ohw];
                let dw_i = if w_needs {
                    let mut dw = vec![T::zero(); co * ckk];
                    // dW = dY (co x ohw) * cols^T (ohw x ckk)
                    T::gemm(co, ohw, ckk, T::one(), gy_i, ohw as isize, 1, &cols, 1, ohw as isize, T::zero(), &mut dw);
                    Some(dw)
                } else {
                    None
                };
                let dx_i = if x_needs {
                    let mut dcols = vec![T::zero(); ckk * ohw];
                    // dcols = W^T (ckk x co) * dY (co x ohw)
                    T::gemm(ckk, co, ohw, T::one(), &w_data, 1, ckk as isize, gy_i, ohw as isize, 1, T::zero(), &mut dcols);
                    let mut dx = vec![T::zero(); ci * h * iw];
                    col2im_add(&dcols, ci, h, iw, kh, kw, pad, stride, oh, ow, &mut dx);
                    Some(dx)
                } else {
                    None
                };
                (dw_i, dx_i)
            })
            .collect();
        if w_needs {
            let mut dw = NdArr::zeros(&self.nodes[w.0].data.shape.clone());
            for (dw_i, _) in &per_sample {
                if let Some(d) = dw_i {
                    for (a, b) in dw.data.iter_mut().zip(d) {
                        *a = *a + *b;
                    }
                }
            }
            add_local(grads, w, dw, &self.nodes);
        }
        if x_needs {
            let mut dx = NdArr::zeros(&[n, ci, h, iw]);
            for (i, (_, dx_i)) in per_sample.iter().enumerate() {
                if let Some(d) = dx_i {
                    dx.data[i * ci * h * iw..(i + 1) * ci * h * iw].copy_from_slice(d);
                }
            }
            add_local(grads, x, dx, &self.nodes);
        }
        if let Some(bid) = b {
            if self.nodes[bid.0].needs_grad {
                let mut db = NdArr::zeros(&[co]);
                for i in 0..n {
                    for c in 0..co {
                        let base = (i * co + c) * ohw;
                        for k in 0..ohw {
                            db.data[c] = db.data[c] + gy.data[base + k];
                        }
                    }
                }
                add_local(grads, bid, db, &self.nodes);
            }
        }
    }
}

fn add_local<T: Scalar>(
    grads: &mut [Option<NdArr<T>>],
    id: TensorId,
    delta: NdArr<T>,
    nodes: &[Node<T>],
) {
    if !nodes[id.0].needs_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => {
            for (a, b) in g.data.iter_mut().zip(&delta.data) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> NdArr<f64> {
        let n: usize = shape.iter().product();
        NdArr::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Direct quadruple-loop convolution for the oracle.
    fn conv_naive(
        x: &NdArr<f64>, w: &NdArr<f64>, b: Option<&[f64]>, stride: usize, pad: usize,
    ) -> NdArr<f64> {
        let (n, ci, h, iw) = x.dims4();
        let (co, _, kh, kw) = w.dims4();
        let oh = conv_out(h, kh, pad, stride);
        let ow = conv_out(iw, kw, pad, stride);
        let mut out = NdArr::zeros(&[n, co, oh, ow]);
        for i in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[o]);
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

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1usize, 2usize), (2, 2), (1, 0), (2, 1)] {
            let x = randn(&mut rng, &[2, 3, 8, 8]);
            let w = randn(&mut rng, &[4, 3, 5, 5]);
            let bias: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = conv_naive(&x, &w, Some(&bias), stride, pad);
            let mut g: Graph<f64> = Graph::new();
            let xi = g.leaf(x, false);
            let wi = g.leaf(w, false);
            let bi = g.leaf(NdArr::from_vec(&[4], bias), false);
            let y = g.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
            assert_eq!(g.data(y).shape, expect.shape);
            for (a, b) in g.data(y).data.iter().zip(&expect.data) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_shape_law_holds_over_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [5usize, 9, 16, 31, 64] {
            for stride in [1usize, 2] {
                let x = randn(&mut rng, &[1, 2, n, n]);
                let w = randn(&mut rng, &[3, 2, 5, 5]);
                let mut g: Graph<f64> = Graph::new();
                let xi = g.leaf(x, false);
                let wi = g.leaf(w, false);
                let y = g.conv2d(xi, wi, None, stride, 2).unwrap();
                let expect = (n + 4 - 5) / stride + 1;
                assert_eq!(g.data(y).shape, vec![1, 3, expect, expect]);
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[1, 3, 8, 8]);
        let w = randn(&mut rng, &[4, 2, 5, 5]);
        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x, false);
        let wi = g.leaf(w, false);
        assert!(matches!(
            g.conv2d(xi, wi, None, 1, 2),
            Err(AutogradError::ChannelMismatch { input: 3, kernel: 2 })
        ));
    }

    /// Builds a small network ending in a scalar and checks every leaf
    /// gradient against central finite differences.
    fn check_grads<F>(seed: u64, shapes: &[Vec<usize>], build: F)
    where
        F: Fn(&mut Graph<f64>, &[TensorId]) -> TensorId,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let leaves: Vec<NdArr<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();
        let mut g: Graph<f64> = Graph::new();
        let ids: Vec<TensorId> = leaves.iter().map(|l| g.leaf(l.clone(), true)).collect();
        let loss = build(&mut g, &ids);
        g.backward(loss).unwrap();
        let eps = 1e-5;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = g.grad(ids[li]).expect("missing grad").clone();
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
                assert!(
                    (num - ana).abs() / denom < 1e-4,
                    "leaf {li} elem {k}: numeric {num} vs analytic {ana}"
                );
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_grads(seed, &[vec![2, 2, 6, 6], vec![3, 2, 3, 3], vec![3]], |g, ids| {
                let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1).unwrap();
                let r = g.relu(y);
                g.sum(r)
            });
        }
    }

    #[test]
    fn strided_conv_gradients_match_finite_differences() {
        for seed in 10..14 {
            check_grads(seed, &[vec![1, 2, 8, 8], vec![2, 2, 5, 5]], |g, ids| {
                let y = g.conv2d(ids[0], ids[1], None, 2, 2).unwrap();
                g.sum(y)
            });
        }
    }

    #[test]
    fn kernel_flip_gradients_match_finite_differences() {
        for seed in 20..24 {
            check_grads(seed, &[vec![1, 3, 6, 6], vec![3, 2, 3, 3]], |g, ids| {
                let wt = g.kernel_flip(ids[1]);
                let y = g.conv2d(ids[0], wt, None, 1, 1).unwrap();
                let r = g.relu(y);
                g.sum(r)
            });
        }
    }

    #[test]
    fn upsample_batchnorm_scalebias_gradients() {
        for seed in 30..34 {
            check_grads(seed, &[vec![2, 2, 3, 3], vec![2], vec![2]], |g, ids| {
                let u = g.upsample_nearest2x(ids[0]);
                let (bn, _, _) = g.batchnorm_train(u, 1e-5).unwrap();
                let sb = g.scale_bias(bn, ids[1], ids[2]).unwrap();
                let r = g.relu(sb);
                g.sum(r)
            });
        }
    }

    #[test]
    fn add_mul_concat_mse_gradients() {
        for seed in 40..44 {
            check_grads(
                seed,
                &[vec![1, 2, 4, 4], vec![1, 2, 4, 4], vec![1, 4, 4, 4]],
                |g, ids| {
                    let s = g.add(ids[0], ids[1]).unwrap();
                    let m = g.mul(s, ids[1]).unwrap();
                    let cat = g.concat_channels(m, ids[0]).unwrap();
                    let mask = g.leaf(
                        NdArr::from_vec(
                            &[1, 4, 4, 4],
                            (0..64).map(|i| if i % 3 == 0 { 0.0 } else { 1.0 }).collect(),
                        ),
                        false,
                    );
                    let target = g.leaf(NdArr::zeros(&[1, 4, 4, 4]), false);
                    let pred = g.mul(cat, ids[2]).unwrap();
                    g.mse_masked(pred, target, mask).unwrap()
                },
            );
        }
    }

    #[test]
    fn batchnorm_eval_is_affine_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let x = randn(&mut rng, &[2, 3, 4, 4]);
        let mean = vec![0.2, -0.1, 0.4];
        let var = vec![1.5, 0.7, 2.0];
        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x.clone(), true);
        let y = g.batchnorm_eval(xi, &mean, &var, 1e-5).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let grad = g.grad(xi).unwrap();
        for c in 0..3 {
            let istd = 1.0 / (var[c] + 1e-5f64).sqrt();
            for v in &grad.data[c * 16..(c + 1) * 16] {
                assert!((v - istd).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let x = randn(&mut rng, &[4, 2, 5, 5]);
        let mut g: Graph<f64> = Graph::new();
        let xi = g.leaf(x, false);
        let (y, mean, var) = g.batchnorm_train(xi, 1e-5).unwrap();
        let out = g.data(y);
        let m = 4 * 25;
        for c in 0..2 {
            let mut acc = 0.0;
            let mut sq = 0.0;
            for i in 0..4 {
                for k in 0..25 {
                    let v = out.data[(i * 2 + c) * 25 + k];
                    acc += v;
                    sq += v * v;
                }
            }
            assert!((acc / m as f64).abs() < 1e-12);
            // Variance of the output is var/(var+eps), just under 1.
            let out_var = sq / m as f64;
            let expect = var[c] / (var[c] + 1e-5);
            assert!((out_var - expect).abs() < 1e-10);
            assert!(mean[c].is_finite());
        }
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(NdArr::from_vec(&[2], vec![1.0, 2.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![2.0, 2.0]);
        g.zero_grads();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(NdArr::from_vec(&[2], vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(AutogradError::NonScalarLoss { .. })));
    }

    #[test]
    fn mse_masked_value_and_empty_mask() {
        let mut g: Graph<f64> = Graph::new();
        let p = g.leaf(NdArr::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let t = g.leaf(NdArr::from_vec(&[1, 1, 2, 2], vec![0.0, 2.0, 3.0, 0.0]), false);
        let m = g.leaf(NdArr::from_vec(&[1, 1, 2, 2], vec![1.0, 1.0, 1.0, 0.0]), false);
        let l = g.mse_masked(p, t, m).unwrap();
        // Only the first three pixels count: (1 + 0 + 0) / 3.
        assert!((g.value(l) - 1.0 / 3.0).abs() < 1e-12);
        let zero_mask = g.leaf(NdArr::zeros(&[1, 1, 2, 2]), false);
        let l2 = g.mse_masked(p, t, zero_mask).unwrap();
        assert_eq!(g.value(l2), 0.0);
    }

    #[test]
    fn f32_and_f64_conv_agree_to_single_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let x = randn(&mut rng, &[1, 2, 8, 8]);
        let w = randn(&mut rng, &[3, 2, 5, 5]);
        let mut g64: Graph<f64> = Graph::new();
        let xi = g64.leaf(x.clone(), false);
        let wi = g64.leaf(w.clone(), false);
        let y64 = g64.conv2d(xi, wi, None, 1, 2).unwrap();
        let mut g32: Graph<f32> = Graph::new();
        let xi = g32.leaf(x.map_precision::<f32>(), false);
        let wi = g32.leaf(w.map_precision::<f32>(), false);
        let y32 = g32.conv2d(xi, wi, None, 1, 2).unwrap();
        for (a, b) in g64.data(y64).data.iter().zip(&g32.data(y32).data) {
            assert!((a - *b as f64).abs() < 1e-4);
        }
    }
}
