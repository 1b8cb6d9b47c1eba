//! Trainable pieces: a small three-conv backbone emitting pre-activation
//! features, the classifier head over the vectorized SPD descriptor,
//! softmax cross-entropy, and SGD with momentum plus the two-stage
//! learning-rate schedules.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{LinalgError, Matrix, SymMatrix};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Dense nd-array, row-major in the trailing dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// 3×3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    /// [out][in][3][3]
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayer {
    /// He fan-in initialization, zero bias.
    pub fn new_he(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (in_ch * 9) as f64).sqrt();
        let mut weight = Tensor::zeros(vec![out_ch, in_ch, 3, 3]);
        for w in weight.data.iter_mut() {
            *w = gaussian(rng) * std;
        }
        Self {
            in_ch,
            out_ch,
            weight,
            bias: Tensor::zeros(vec![out_ch]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: Tensor::zeros(self.weight.shape.clone()),
            bias: Tensor::zeros(self.bias.shape.clone()),
        }
    }

    /// input [in_ch][h][w] → output [out_ch][h][w].
    pub fn forward(&self, input: &Tensor, h: usize, w: usize) -> Tensor {
        debug_assert_eq!(input.len(), self.in_ch * h * w);
        let mut out = Tensor::zeros(vec![self.out_ch, h, w]);
        for o in 0..self.out_ch {
            let b = self.bias.data[o];
            let plane = &mut out.data[o * h * w..(o + 1) * h * w];
            if b != 0.0 {
                plane.iter_mut().for_each(|v| *v = b);
            }
            for i in 0..self.in_ch {
                let src = &input.data[i * h * w..(i + 1) * h * w];
                let wbase = ((o * self.in_ch) + i) * 9;
                conv3x3_accumulate(src, &self.weight.data[wbase..wbase + 9], plane, h, w);
            }
        }
        out
    }

    /// Returns (grad_input, grad_weight, grad_bias).
    pub fn backward(
        &self,
        input: &Tensor,
        grad_out: &Tensor,
        h: usize,
        w: usize,
    ) -> (Tensor, Tensor, Tensor) {
        let mut grad_in = Tensor::zeros(vec![self.in_ch, h, w]);
        let mut grad_w = Tensor::zeros(self.weight.shape.clone());
        let mut grad_b = Tensor::zeros(self.bias.shape.clone());

        for o in 0..self.out_ch {
            let gout = &grad_out.data[o * h * w..(o + 1) * h * w];
            grad_b.data[o] = gout.iter().sum();
            for i in 0..self.in_ch {
                let src = &input.data[i * h * w..(i + 1) * h * w];
                let wbase = ((o * self.in_ch) + i) * 9;
                // Weight gradient: correlation of input with grad_out.
                conv3x3_weight_grad(src, gout, &mut grad_w.data[wbase..wbase + 9], h, w);
                // Input gradient: convolution of grad_out with the flipped kernel.
                let gin = &mut grad_in.data[i * h * w..(i + 1) * h * w];
                conv3x3_input_grad(gout, &self.weight.data[wbase..wbase + 9], gin, h, w);
            }
        }
        (grad_in, grad_w, grad_b)
    }
}

/// out += kernel ⋆ src (3×3, pad 1), on one plane.
fn conv3x3_accumulate(src: &[f64], k: &[f64], out: &mut [f64], h: usize, w: usize) {
    for (idx, &kv) in k.iter().enumerate() {
        if kv == 0.0 {
            continue;
        }
        let dy = (idx / 3) as isize - 1;
        let dx = (idx % 3) as isize - 1;
        shifted_axpy(src, out, kv, dy, dx, h, w, false);
    }
}

/// grad_w[idx] += Σ src(y+dy, x+dx)·gout(y, x).
fn conv3x3_weight_grad(src: &[f64], gout: &[f64], grad_k: &mut [f64], h: usize, w: usize) {
    for (idx, gk) in grad_k.iter_mut().enumerate() {
        let dy = (idx / 3) as isize - 1;
        let dx = (idx % 3) as isize - 1;
        let (y0, y1) = clip_range(dy, h);
        let (x0, x1) = clip_range(dx, w);
        let mut acc = 0.0;
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            let srow = &src[sy * w + x0.wrapping_add_signed(dx)..sy * w + (x1 - 1).wrapping_add_signed(dx) + 1];
            let grow = &gout[y * w + x0..y * w + x1];
            for (s, g) in srow.iter().zip(grow) {
                acc += s * g;
            }
        }
        *gk += acc;
    }
}

/// grad_in(y+dy, x+dx) += k[idx]·gout(y, x): scatter with the same shifts.
fn conv3x3_input_grad(gout: &[f64], k: &[f64], grad_in: &mut [f64], h: usize, w: usize) {
    for (idx, &kv) in k.iter().enumerate() {
        if kv == 0.0 {
            continue;
        }
        let dy = (idx / 3) as isize - 1;
        let dx = (idx % 3) as isize - 1;
        shifted_axpy(gout, grad_in, kv, dy, dx, h, w, true);
    }
}

fn clip_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi)
}

/// Either out(y,x) += a·src(y+dy, x+dx)  (scatter = false)
/// or     out(y+dy, x+dx) += a·src(y,x)  (scatter = true).
fn shifted_axpy(
    src: &[f64],
    out: &mut [f64],
    a: f64,
    dy: isize,
    dx: isize,
    h: usize,
    w: usize,
    scatter: bool,
) {
    let (y0, y1) = clip_range(dy, h);
    let (x0, x1) = clip_range(dx, w);
    for y in y0..y1 {
        let sy = (y as isize + dy) as usize;
        let (srow, orow) = if scatter {
            (
                y * w + x0..y * w + x1,
                sy * w + x0.wrapping_add_signed(dx)..sy * w + (x1 - 1).wrapping_add_signed(dx) + 1,
            )
        } else {
            (
                sy * w + x0.wrapping_add_signed(dx)..sy * w + (x1 - 1).wrapping_add_signed(dx) + 1,
                y * w + x0..y * w + x1,
            )
        };
        let s = &src[srow];
        let o = &mut out[orow];
        for (ov, sv) in o.iter_mut().zip(s) {
            *ov += a * sv;
        }
    }
}

pub fn relu(t: &Tensor) -> Tensor {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Pass-through where the forward output was positive.
pub fn relu_backward(activated: &Tensor, grad_out: &Tensor) -> Tensor {
    Tensor {
        shape: grad_out.shape.clone(),
        data: activated
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&a, &g)| if a > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// 2×2 max pooling, stride 2 (even h, w). Returns output and per-cell
/// argmax offsets for routing the backward pass.
pub fn maxpool2(input: &Tensor, ch: usize, h: usize, w: usize) -> (Tensor, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![ch, oh, ow]);
    let mut arg = vec![0u32; ch * oh * ow];
    for c in 0..ch {
        let plane = &input.data[c * h * w..(c + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (2 * y + dy) * w + 2 * x + dx;
                        let v = plane[idx];
                        if v > best {
                            best = v;
                            best_idx = idx as u32;
                        }
                    }
                }
                out.data[(c * oh + y) * ow + x] = best;
                arg[(c * oh + y) * ow + x] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(
    grad_out: &Tensor,
    arg: &[u32],
    ch: usize,
    h: usize,
    w: usize,
) -> Tensor {
    let (oh, ow) = (h / 2, w / 2);
    let mut grad_in = Tensor::zeros(vec![ch, h, w]);
    for c in 0..ch {
        for i in 0..oh * ow {
            let g = grad_out.data[c * oh * ow + i];
            grad_in.data[c * h * w + arg[c * oh * ow + i] as usize] += g;
        }
    }
    grad_in
}

/// Three 3×3 conv blocks: conv(in→16)+ReLU+pool, conv(16→32)+ReLU+pool,
/// conv(32→D) left pre-activation. Input sides must be divisible by 4.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

pub const HIDDEN1: usize = 16;
pub const HIDDEN2: usize = 32;

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    input: Tensor,
    h: usize,
    w: usize,
    a1: Tensor,
    idx1: Vec<u32>,
    p1: Tensor,
    a2: Tensor,
    idx2: Vec<u32>,
    p2: Tensor,
}

#[derive(Debug, Clone)]
pub struct BackboneGrads {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
}

impl Backbone {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: ConvLayer::new_he(in_ch, HIDDEN1, rng),
            conv2: ConvLayer::new_he(HIDDEN1, HIDDEN2, rng),
            conv3: ConvLayer::new_he(HIDDEN2, out_ch, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_ch
    }

    pub fn zero_grads(&self) -> BackboneGrads {
        BackboneGrads {
            conv1: self.conv1.zeros_like(),
            conv2: self.conv2.zeros_like(),
            conv3: self.conv3.zeros_like(),
        }
    }

    /// input [in_ch][h][w] → features [D][h/4][w/4].
    pub fn forward(&self, input: Tensor, h: usize, w: usize) -> Result<(Tensor, BackboneCache), NetError> {
        if h % 4 != 0 || w % 4 != 0 {
            return Err(NetError::ShapeMismatch(format!(
                "backbone input {h}x{w} must be divisible by 4"
            )));
        }
        if input.len() != self.conv1.in_ch * h * w {
            return Err(NetError::ShapeMismatch(format!(
                "backbone input has {} values, expected {}x{h}x{w}",
                input.len(),
                self.conv1.in_ch
            )));
        }
        let a1 = relu(&self.conv1.forward(&input, h, w));
        let (p1, idx1) = maxpool2(&a1, HIDDEN1, h, w);
        let (h2, w2) = (h / 2, w / 2);
        let a2 = relu(&self.conv2.forward(&p1, h2, w2));
        let (p2, idx2) = maxpool2(&a2, HIDDEN2, h2, w2);
        let (h4, w4) = (h2 / 2, w2 / 2);
        let feats = self.conv3.forward(&p2, h4, w4);
        let cache = BackboneCache {
            input,
            h,
            w,
            a1,
            idx1,
            p1,
            a2,
            idx2,
            p2,
        };
        Ok((feats, cache))
    }

    /// Gradient of the parameters given the upstream feature gradient.
    pub fn backward(&self, cache: &BackboneCache, grad_feats: &Tensor) -> BackboneGrads {
        let (h, w) = (cache.h, cache.w);
        let (h2, w2) = (h / 2, w / 2);
        let (h4, w4) = (h2 / 2, w2 / 2);

        let (g_p2, gw3, gb3) = self.conv3.backward(&cache.p2, grad_feats, h4, w4);
        let g_a2 = maxpool2_backward(&g_p2, &cache.idx2, HIDDEN2, h2, w2);
        let g_pre2 = relu_backward(&cache.a2, &g_a2);
        let (g_p1, gw2, gb2) = self.conv2.backward(&cache.p1, &g_pre2, h2, w2);
        let g_a1 = maxpool2_backward(&g_p1, &cache.idx1, HIDDEN1, h, w);
        let g_pre1 = relu_backward(&cache.a1, &g_a1);
        let (_, gw1, gb1) = self.conv1.backward(&cache.input, &g_pre1, h, w);

        BackboneGrads {
            conv1: ConvLayer {
                in_ch: self.conv1.in_ch,
                out_ch: self.conv1.out_ch,
                weight: gw1,
                bias: gb1,
            },
            conv2: ConvLayer {
                in_ch: self.conv2.in_ch,
                out_ch: self.conv2.out_ch,
                weight: gw2,
                bias: gb2,
            },
            conv3: ConvLayer {
                in_ch: self.conv3.in_ch,
                out_ch: self.conv3.out_ch,
                weight: gw3,
                bias: gb3,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Classifier head
// ---------------------------------------------------------------------------

/// Upper-triangle vectorization with √2-scaled off-diagonals, so the dot
/// product of two vectorized matrices equals their Frobenius inner product.
pub fn vectorize_sym(g: &SymMatrix) -> Vec<f64> {
    let n = g.order();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    let s = std::f64::consts::SQRT_2;
    for i in 0..n {
        v.push(g.get(i, i));
        for j in (i + 1)..n {
            v.push(s * g.get(i, j));
        }
    }
    v
}

/// Adjoint of `vectorize_sym`: maps a gradient w.r.t. the vectorized form
/// back to a symmetric-matrix gradient.
pub fn devectorize_grad(v: &[f64], n: usize) -> Result<SymMatrix, NetError> {
    if v.len() != n * (n + 1) / 2 {
        return Err(NetError::ShapeMismatch(format!(
            "vector length {} vs order {n}",
            v.len()
        )));
    }
    let mut m = Matrix::zeros(n, n);
    let inv_s = 1.0 / std::f64::consts::SQRT_2;
    let mut k = 0;
    for i in 0..n {
        m.set(i, i, v[k]);
        k += 1;
        for j in (i + 1)..n {
            m.set(i, j, v[k] * inv_s);
            m.set(j, i, v[k] * inv_s);
            k += 1;
        }
    }
    Ok(SymMatrix::new(m)?)
}

pub fn sym_vec_len(order: usize) -> usize {
    order * (order + 1) / 2
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub classes: usize,
    pub dim: usize,
    /// [classes][dim]
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let mut weight = Tensor::zeros(vec![classes, dim]);
        for w in weight.data.iter_mut() {
            *w = gaussian(rng) * std;
        }
        Self {
            classes,
            dim,
            weight,
            bias: Tensor::zeros(vec![classes]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            classes: self.classes,
            dim: self.dim,
            weight: Tensor::zeros(self.weight.shape.clone()),
            bias: Tensor::zeros(self.bias.shape.clone()),
        }
    }

    pub fn logits(&self, v: &[f64]) -> Result<Vec<f64>, NetError> {
        if v.len() != self.dim {
            return Err(NetError::ShapeMismatch(format!(
                "head expects dim {}, got {}",
                self.dim,
                v.len()
            )));
        }
        let mut out = self.bias.data.clone();
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weight.data[c * self.dim..(c + 1) * self.dim];
            *o += row.iter().zip(v).map(|(w, x)| w * x).sum::<f64>();
        }
        Ok(out)
    }

    /// Gradients (grad_weight, grad_bias, grad_input) from the logits grad.
    pub fn backward(&self, v: &[f64], grad_logits: &[f64]) -> (Tensor, Tensor, Vec<f64>) {
        let mut gw = Tensor::zeros(self.weight.shape.clone());
        let gb = Tensor {
            shape: self.bias.shape.clone(),
            data: grad_logits.to_vec(),
        };
        let mut gv = vec![0.0; self.dim];
        for c in 0..self.classes {
            let g = grad_logits[c];
            let row = &self.weight.data[c * self.dim..(c + 1) * self.dim];
            let grow = &mut gw.data[c * self.dim..(c + 1) * self.dim];
            for k in 0..self.dim {
                grow[k] = g * v[k];
                gv[k] += g * row[k];
            }
        }
        (gw, gb, gv)
    }
}

/// Vectorizes the SPD feature, applies the head, and softmaxes.
pub fn classify(g: &SymMatrix, head: &ClassifierHead) -> Result<Vec<f64>, NetError> {
    let v = vectorize_sym(g);
    Ok(softmax(&head.logits(&v)?))
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// −log p[label]; the gradient w.r.t. logits is p − onehot(label).
pub fn cross_entropy(p: &[f64], label: usize) -> Result<(f64, Vec<f64>), NetError> {
    if label >= p.len() {
        return Err(NetError::LabelOutOfRange {
            label,
            classes: p.len(),
        });
    }
    let loss = -(p[label].max(1e-300)).ln();
    let mut grad = p.to_vec();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

pub const MOMENTUM: f64 = 0.9;
pub const WEIGHT_DECAY: f64 = 5e-4;
/// Learning-rate decay factor shared by both schedules.
pub const LR_DECAY: f64 = 0.15;
/// Warm-up (head-only) stage decays every 30 epochs.
pub const WARMUP_DECAY_EVERY: usize = 30;
/// Fine-tuning stage decays every 3 epochs.
pub const FINETUNE_DECAY_EVERY: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Finetune,
}

/// Learning rate at a 0-indexed epoch within the stage.
pub fn lr_at(stage: Stage, base_lr: f64, epoch_in_stage: usize) -> f64 {
    let every = match stage {
        Stage::Warmup => WARMUP_DECAY_EVERY,
        Stage::Finetune => FINETUNE_DECAY_EVERY,
    };
    base_lr * LR_DECAY.powi((epoch_in_stage / every) as i32)
}

/// v ← m·v + (g + wd·w); w ← w − lr·v.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + (g + weight_decay * *w);
        *w -= lr * *v;
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn backbone_shapes() {
        let mut rng = stream(0, &[1]);
        let bb = Backbone::new(3, 32, &mut rng);
        let input = Tensor::zeros(vec![3, 64, 64]);
        let (f, _) = bb.forward(input, 64, 64).unwrap();
        assert_eq!(f.shape, vec![32, 16, 16]);
        // N = 16·16 = 256 spatial locations.
        assert_eq!(f.len(), 32 * 256);
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let mut rng = stream(0, &[1]);
        let mut bb = Backbone::new(1, 4, &mut rng);
        for layer in [&mut bb.conv1, &mut bb.conv2, &mut bb.conv3] {
            layer.weight.data.iter_mut().for_each(|v| *v = 0.0);
            layer.bias.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut input = Tensor::zeros(vec![1, 8, 8]);
        input.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i % 7) as f64 * 0.1);
        let (f, _) = bb.forward(input, 8, 8).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = stream(3, &[2]);
        let conv = ConvLayer::new_he(2, 3, &mut rng);
        let (h, w) = (5, 4);
        let mut input = Tensor::zeros(vec![2, h, w]);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.2;
        }
        let out = conv.forward(&input, h, w);
        // Direct quadruple loop as the oracle.
        for o in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = conv.bias.data[o];
                    for i in 0..2 {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let yy = y as isize + ky as isize - 1;
                                let xx = x as isize + kx as isize - 1;
                                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                acc += conv.weight.data[((o * 2 + i) * 3 + ky) * 3 + kx]
                                    * input.data[(i * h + yy as usize) * w + xx as usize];
                            }
                        }
                    }
                    let got = out.data[(o * h + y) * w + x];
                    assert_close(got, acc, 1e-12);
                }
            }
        }
    }

    #[test]
    fn backbone_gradcheck_small() {
        let mut rng = stream(7, &[0]);
        let bb = Backbone::new(1, 4, &mut rng);
        let (h, w) = (8, 8);
        let mut input = Tensor::zeros(vec![1, h, w]);
        for v in input.data.iter_mut() {
            *v = rng.gen_range(0.05..1.0);
        }
        // Random linear functional over the features as the scalar loss.
        let (f0, cache) = bb.forward(input.clone(), h, w).unwrap();
        let wvec: Vec<f64> = (0..f0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let loss = |bb: &Backbone| {
            let (f, _) = bb.forward(input.clone(), h, w).unwrap();
            f.data.iter().zip(&wvec).map(|(a, b)| a * b).sum::<f64>()
        };

        let grad_feats = Tensor {
            shape: f0.shape.clone(),
            data: wvec.clone(),
        };
        let grads = bb.backward(&cache, &grad_feats);

        let eps = 1e-5;
        // A sample of parameters from each layer.
        let picks = [(0usize, 3usize), (0, 7), (1, 11), (1, 40), (2, 5), (2, 100)];
        for (layer, idx) in picks {
            let mut plus = bb.clone();
            let mut minus = bb.clone();
            let (p, m) = match layer {
                0 => (&mut plus.conv1.weight, &mut minus.conv1.weight),
                1 => (&mut plus.conv2.weight, &mut minus.conv2.weight),
                _ => (&mut plus.conv3.weight, &mut minus.conv3.weight),
            };
            p.data[idx] += eps;
            m.data[idx] -= eps;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            let analytic = match layer {
                0 => grads.conv1.weight.data[idx],
                1 => grads.conv2.weight.data[idx],
                _ => grads.conv3.weight.data[idx],
            };
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0);
            assert!(rel <= 1e-4, "layer {layer} idx {idx}: fd {fd} vs {analytic}");
        }
    }

    #[test]
    fn vectorize_preserves_inner_product() {
        let a = SymMatrix::from_rows(3, vec![1.0, 0.5, -0.2, 0.5, 2.0, 0.3, -0.2, 0.3, 0.7])
            .unwrap();
        let b = SymMatrix::from_rows(3, vec![0.4, -0.1, 0.9, -0.1, 1.5, 0.2, 0.9, 0.2, -0.6])
            .unwrap();
        let va = vectorize_sym(&a);
        let vb = vectorize_sym(&b);
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
        let mut frob = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                frob += a.get(i, j) * b.get(i, j);
            }
        }
        assert_close(dot, frob, 1e-12);
        assert_eq!(va.len(), sym_vec_len(3));
    }

    #[test]
    fn devectorize_is_adjoint() {
        // <devec(v), S>_F == <v, vec(S)> for any v and symmetric S.
        let s = SymMatrix::from_rows(2, vec![0.8, -0.3, -0.3, 1.1]).unwrap();
        let v = [0.2, 0.7, -0.4];
        let m = devectorize_grad(&v, 2).unwrap();
        let lhs: f64 = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * s.get(i, j))
            .sum();
        let vs = vectorize_sym(&s);
        let rhs: f64 = v.iter().zip(&vs).map(|(a, b)| a * b).sum();
        assert_close(lhs, rhs, 1e-12);
    }

    #[test]
    fn softmax_and_cross_entropy() {
        let p = softmax(&[0.0, 0.0]);
        assert_close(p[0], 0.5, 1e-15);
        assert_close(p[1], 0.5, 1e-15);

        let p = softmax(&[3.0, -1.0, 0.5, 2.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));

        let onehot = [0.0, 1.0, 0.0];
        let (loss, grad) = cross_entropy(&onehot, 1).unwrap();
        assert_close(loss, 0.0, 1e-12);
        assert_close(grad.iter().sum::<f64>(), 0.0, 1e-12);

        let uniform = [1.0 / 8.0; 8];
        let (loss, grad) = cross_entropy(&uniform, 3).unwrap();
        assert_close(loss, (8.0f64).ln(), 1e-12);
        assert_close(grad.iter().sum::<f64>(), 0.0, 1e-12);

        assert!(matches!(
            cross_entropy(&uniform, 8),
            Err(NetError::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn sgd_momentum_first_step() {
        let mut w = [0.0];
        let mut v = [0.0];
        sgd_momentum_step(&mut w, &[1.0], &mut v, 0.1, 0.9, 0.0);
        assert_close(v[0], 1.0, 1e-15);
        assert_close(w[0], -0.1, 1e-15);
    }

    #[test]
    fn sgd_momentum_decays_geometrically_without_grads() {
        let mut w = [1.0];
        let mut v = [1.0];
        sgd_momentum_step(&mut w, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_close(v[0], 0.9, 1e-15);
        assert_close(w[0], 1.0 - 0.09, 1e-15);
        sgd_momentum_step(&mut w, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert_close(v[0], 0.81, 1e-15);
    }

    #[test]
    fn lr_schedule_values() {
        assert_close(lr_at(Stage::Warmup, 0.1, 0), 0.1, 1e-15);
        assert_close(lr_at(Stage::Warmup, 0.1, 29), 0.1, 1e-15);
        assert_close(lr_at(Stage::Warmup, 0.1, 30), 0.015, 1e-15);
        assert_close(lr_at(Stage::Finetune, 1e-3, 2), 1e-3, 1e-18);
        assert_close(lr_at(Stage::Finetune, 1e-3, 3), 1.5e-4, 1e-18);
        assert_close(lr_at(Stage::Finetune, 1e-3, 6), 2.25e-5, 1e-18);
    }

    #[test]
    fn head_backward_matches_fd() {
        let mut rng = stream(5, &[9]);
        let head = ClassifierHead::new(3, 6, &mut rng);
        let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let label = 1;
        let loss_of = |head: &ClassifierHead| {
            let p = softmax(&head.logits(&v).unwrap());
            cross_entropy(&p, label).unwrap().0
        };
        let p = softmax(&head.logits(&v).unwrap());
        let (_, dlogits) = cross_entropy(&p, label).unwrap();
        let (gw, gb, _) = head.backward(&v, &dlogits);

        let eps = 1e-6;
        for idx in [0usize, 7, 11, 17] {
            let mut plus = head.clone();
            plus.weight.data[idx] += eps;
            let mut minus = head.clone();
            minus.weight.data[idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert_close(fd, gw.data[idx], 1e-6);
        }
        for idx in 0..3 {
            let mut plus = head.clone();
            plus.bias.data[idx] += eps;
            let mut minus = head.clone();
            minus.bias.data[idx] -= eps;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
            assert_close(fd, gb.data[idx], 1e-6);
        }
    }
}
