//! Stage 2: zero-shot low-light enhancement on the Gaussian colors.
//!
//! A compact convolutional encoder reads the fixed Stage-1 render. A 1×1
//! head maps its features to `K` mixing logits, which are sampled
//! bilinearly at every Gaussian center and softmaxed. Each primitive's color
//! then becomes a convex mix of itself (the identity slot, channel 0) and
//! `K − 1` residual MLP color operators. Geometry and opacity never change.
//! Only the encoder, head and operators are trained.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::{adam_step, lr_schedule_cosine, AdamState};
use crate::gaussian::GaussianSet;
use crate::image::ImageBuffer;
use crate::losses::{reflect, total_loss, LossBreakdown, LossConfig};
use crate::raster::{backward, build_tiles, render_tiles, RasterOptions, TileIndex, DEFAULT_TILE_PX};

/// Channel widths of the encoder, input first.
pub const ENCODER_CHANNELS: [usize; 5] = [3, 16, 24, 32, 32];
/// Stride of each encoder convolution.
pub const ENCODER_STRIDES: [usize; 4] = [2, 2, 2, 1];
/// Feature dimension `D` produced by the encoder.
pub const FEATURE_DIM: usize = 32;
pub const DEFAULT_K: usize = 16;
pub const DEFAULT_HIDDEN: usize = 16;

const KERNEL: usize = 3;

fn he_normal(rng: &mut ChaCha8Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Numerically stable in-place softmax.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Vector-Jacobian product of softmax: `dl_k = w_k (dw_k − Σ_j w_j dw_j)`.
fn softmax_vjp(w: &[f64], dw: &[f64], dl: &mut [f64]) {
    let dot: f64 = w.iter().zip(dw).map(|(a, b)| a * b).sum();
    for ((o, &wk), &g) in dl.iter_mut().zip(w).zip(dw) {
        *o += wk * (g - dot);
    }
}

// ---------------------------------------------------------------------------
// Encoder

/// 3×3 convolution with reflection padding of one pixel.
///
/// Weights are laid out `[out][ky][kx][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![0.0; out_channels * KERNEL * KERNEL * in_channels],
            bias: vec![0.0; out_channels],
        }
    }

    fn patch_len(&self) -> usize {
        KERNEL * KERNEL * self.in_channels
    }

    /// Output extent along an axis of input extent `n`.
    pub fn output_size(&self, n: usize) -> usize {
        n.div_ceil(self.stride)
    }

    /// Source sample offsets of the patch at output `(ox, oy)`.
    fn patch_sources(&self, input: &ImageBuffer, ox: usize, oy: usize, out: &mut [usize; KERNEL * KERNEL]) {
        let (w, h) = (input.width(), input.height());
        for ky in 0..KERNEL {
            let iy = reflect((oy * self.stride + ky) as isize - 1, h);
            for kx in 0..KERNEL {
                let ix = reflect((ox * self.stride + kx) as isize - 1, w);
                out[ky * KERNEL + kx] = (iy * w + ix) * self.in_channels;
            }
        }
    }

    fn gather(&self, input: &ImageBuffer, src: &[usize; KERNEL * KERNEL], patch: &mut [f64]) {
        let cin = self.in_channels;
        for (j, &s) in src.iter().enumerate() {
            patch[j * cin..(j + 1) * cin].copy_from_slice(&input.data()[s..s + cin]);
        }
    }

    /// Pre-activation output.
    pub fn forward(&self, input: &ImageBuffer) -> ImageBuffer {
        let (ow, oh) = (self.output_size(input.width()), self.output_size(input.height()));
        let cout = self.out_channels;
        let plen = self.patch_len();
        let mut out = ImageBuffer::zeros(ow, oh, cout);
        out.data_mut().par_chunks_mut(ow * cout).enumerate().for_each(|(oy, row)| {
            let mut patch = vec![0.0; plen];
            let mut src = [0usize; KERNEL * KERNEL];
            for ox in 0..ow {
                self.patch_sources(input, ox, oy, &mut src);
                self.gather(input, &src, &mut patch);
                for o in 0..cout {
                    let wrow = &self.weight[o * plen..(o + 1) * plen];
                    row[ox * cout + o] = self.bias[o] + dot(wrow, &patch);
                }
            }
        });
        out
    }

    /// Accumulates parameter gradients into `grad` and, when requested, the
    /// input gradient into `grad_input`.
    pub fn backward(
        &self,
        input: &ImageBuffer,
        grad_out: &ImageBuffer,
        grad: &mut ConvLayer,
        mut grad_input: Option<&mut ImageBuffer>,
    ) {
        let (ow, oh) = (grad_out.width(), grad_out.height());
        let (cin, cout) = (self.in_channels, self.out_channels);
        let plen = self.patch_len();
        let mut patch = vec![0.0; plen];
        let mut dpatch = vec![0.0; plen];
        let mut src = [0usize; KERNEL * KERNEL];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out.pixel(ox, oy);
                if g.iter().all(|&v| v == 0.0) {
                    continue;
                }
                self.patch_sources(input, ox, oy, &mut src);
                self.gather(input, &src, &mut patch);
                dpatch.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..cout {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    grad.bias[o] += go;
                    let gw = &mut grad.weight[o * plen..(o + 1) * plen];
                    for (a, &p) in gw.iter_mut().zip(&patch) {
                        *a += go * p;
                    }
                    if grad_input.is_some() {
                        let wrow = &self.weight[o * plen..(o + 1) * plen];
                        for (d, &wv) in dpatch.iter_mut().zip(wrow) {
                            *d += go * wv;
                        }
                    }
                }
                if let Some(gi) = grad_input.as_deref_mut() {
                    for (j, &s) in src.iter().enumerate() {
                        for c in 0..cin {
                            gi.data_mut()[s + c] += dpatch[j * cin + c];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The compact feature encoder: four 3×3 convolutions with ReLU between
/// them, downsampling by 8 overall.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<ConvLayer>,
}

impl EncoderParams {
    pub fn zeros() -> Self {
        let layers = ENCODER_STRIDES
            .iter()
            .enumerate()
            .map(|(l, &s)| ConvLayer::zeros(ENCODER_CHANNELS[l], ENCODER_CHANNELS[l + 1], s))
            .collect();
        Self { layers }
    }

    /// He-normal weights, zero biases.
    pub fn init(rng: &mut ChaCha8Rng) -> Self {
        let mut enc = Self::zeros();
        for layer in &mut enc.layers {
            let fan_in = layer.patch_len();
            layer.weight = he_normal(rng, fan_in, layer.weight.len());
        }
        enc
    }

    /// Feature-map extent for an input of `width × height`.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        self.layers.iter().fold((width, height), |(w, h), l| (l.output_size(w), l.output_size(h)))
    }
}

/// Activations kept for the backward pass: `acts[0]` is the guide and
/// `acts[l + 1]` the output of layer `l` (post-ReLU except the last).
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub acts: Vec<ImageBuffer>,
}

impl EncoderTrace {
    pub fn features(&self) -> &ImageBuffer {
        self.acts.last().expect("encoder has layers")
    }
}

fn encode(guide: &ImageBuffer, enc: &EncoderParams) -> Result<EncoderTrace> {
    if guide.channels() != ENCODER_CHANNELS[0] {
        return Err(invalid(format!("encoder input needs 3 channels, got {}", guide.channels())));
    }
    if guide.width() == 0 || guide.height() == 0 {
        return Err(invalid("encoder input is empty"));
    }
    let mut acts = vec![guide.clone()];
    let last = enc.layers.len() - 1;
    for (l, layer) in enc.layers.iter().enumerate() {
        let mut out = layer.forward(&acts[l]);
        if l != last {
            out.data_mut().iter_mut().for_each(|v| *v = relu(*v));
        }
        acts.push(out);
    }
    Ok(EncoderTrace { acts })
}

/// Encoder forward pass: `⌈H/8⌉ × ⌈W/8⌉ × D` features.
pub fn extract_features(guide: &ImageBuffer, enc: &EncoderParams) -> Result<ImageBuffer> {
    Ok(encode(guide, enc)?.acts.pop().expect("encoder has layers"))
}

fn encoder_backward(enc: &EncoderParams, trace: &EncoderTrace, grad_features: ImageBuffer, grad: &mut EncoderParams) {
    let last = enc.layers.len() - 1;
    let mut g = grad_features;
    for l in (0..enc.layers.len()).rev() {
        if l != last {
            for (gv, &a) in g.data_mut().iter_mut().zip(trace.acts[l + 1].data()) {
                if a <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = &trace.acts[l];
        if l == 0 {
            enc.layers[0].backward(input, &g, &mut grad.layers[0], None);
        } else {
            let mut gi = ImageBuffer::zeros(input.width(), input.height(), input.channels());
            enc.layers[l].backward(input, &g, &mut grad.layers[l], Some(&mut gi));
            g = gi;
        }
    }
}

// ---------------------------------------------------------------------------
// Weight head and sampling

/// 1×1 convolution `D → K` producing mixing logits. Weights are `[K][D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightHeadParams {
    pub features: usize,
    pub k: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl WeightHeadParams {
    pub fn zeros(features: usize, k: usize) -> Self {
        Self { features, k, weight: vec![0.0; k * features], bias: vec![0.0; k] }
    }

    pub fn init(rng: &mut ChaCha8Rng, features: usize, k: usize) -> Self {
        Self { features, k, weight: he_normal(rng, features, k * features), bias: vec![0.0; k] }
    }
}

/// Per-pixel logits `H' × W' × K`.
pub fn weight_logits(features: &ImageBuffer, head: &WeightHeadParams) -> Result<ImageBuffer> {
    if features.channels() != head.features {
        return Err(Error::DimensionMismatch {
            expected: format!("{} feature channels", head.features),
            actual: format!("{}", features.channels()),
        });
    }
    let (d, k) = (head.features, head.k);
    let mut out = ImageBuffer::zeros(features.width(), features.height(), k);
    for (f, o) in features.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(k)) {
        for (j, ov) in o.iter_mut().enumerate() {
            *ov = head.bias[j] + dot(&head.weight[j * d..(j + 1) * d], f);
        }
    }
    Ok(out)
}

fn head_backward(
    head: &WeightHeadParams,
    features: &ImageBuffer,
    grad_logits: &ImageBuffer,
    grad: &mut WeightHeadParams,
) -> ImageBuffer {
    let (d, k) = (head.features, head.k);
    let mut gf = ImageBuffer::zeros(features.width(), features.height(), d);
    for ((f, gl), gfp) in
        features.data().chunks_exact(d).zip(grad_logits.data().chunks_exact(k)).zip(gf.data_mut().chunks_exact_mut(d))
    {
        for (j, &g) in gl.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[j] += g;
            let row = j * d..(j + 1) * d;
            for ((gw, &fv), (gfv, &wv)) in
                grad.weight[row.clone()].iter_mut().zip(f).zip(gfp.iter_mut().zip(&head.weight[row]))
            {
                *gw += g * fv;
                *gfv += g * wv;
            }
        }
    }
    gf
}

/// Per-pixel softmax over the channels of a logit map.
pub fn softmax_map(logits: &ImageBuffer) -> ImageBuffer {
    let mut m = logits.clone();
    let k = m.channels();
    m.data_mut().chunks_exact_mut(k).for_each(softmax_in_place);
    m
}

/// Bilinear taps of a viewport position on a `gw × gh` grid whose cells
/// cover the viewport evenly; positions outside clamp to the border.
#[derive(Clone, Copy, Debug)]
struct Taps {
    idx: [usize; 4],
    wt: [f64; 4],
}

fn bilinear_taps(p: [f64; 2], viewport: (usize, usize), grid: (usize, usize)) -> Taps {
    let axis = |v: f64, n: usize, g: usize| {
        let u = (v / n as f64 * g as f64 - 0.5).clamp(0.0, (g - 1) as f64);
        let i0 = (u.floor() as usize).min(g - 1);
        let i1 = (i0 + 1).min(g - 1);
        (i0, i1, u - i0 as f64)
    };
    let (x0, x1, fx) = axis(p[0], viewport.0, grid.0);
    let (y0, y1, fy) = axis(p[1], viewport.1, grid.1);
    let gw = grid.0;
    Taps {
        idx: [y0 * gw + x0, y0 * gw + x1, y1 * gw + x0, y1 * gw + x1],
        wt: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    }
}

fn sample_logits(logits: &ImageBuffer, taps: &Taps, out: &mut [f64]) {
    let k = logits.channels();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (&i, &w) in taps.idx.iter().zip(&taps.wt) {
        for (o, &l) in out.iter_mut().zip(&logits.data()[i * k..(i + 1) * k]) {
            *o += w * l;
        }
    }
}

/// Softmax weights of every center, row-major `N × K`. Logits are sampled
/// bilinearly at `centers` (viewport `width × height`) before the softmax.
pub fn sample_weights(logits: &ImageBuffer, centers: &[[f64; 2]], width: usize, height: usize) -> Result<Vec<f64>> {
    if width == 0 || height == 0 || logits.width() == 0 || logits.height() == 0 {
        return Err(invalid("cannot sample an empty weight map"));
    }
    let k = logits.channels();
    let grid = (logits.width(), logits.height());
    let mut out = vec![0.0; centers.len() * k];
    for (mu, w) in centers.iter().zip(out.chunks_exact_mut(k)) {
        sample_logits(logits, &bilinear_taps(*mu, (width, height), grid), w);
        softmax_in_place(w);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Color operators

/// Residual color MLP `3 → H → H → 3` with ReLU, output clamped to `[0, 1]`.
///
/// Weight matrices are row-major `[out][in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorOperatorParams {
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

impl ColorOperatorParams {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            hidden,
            w1: vec![0.0; hidden * 3],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; 3 * hidden],
            b3: vec![0.0; 3],
        }
    }

    /// He-normal inner layers; the output layer is zero so the operator
    /// starts as the identity on in-range colors.
    pub fn init(rng: &mut ChaCha8Rng, hidden: usize) -> Self {
        let mut op = Self::zeros(hidden);
        op.w1 = he_normal(rng, 3, hidden * 3);
        op.w2 = he_normal(rng, hidden, hidden * hidden);
        op
    }

    /// `c + η(c)` before the clamp; fills the hidden activations.
    fn residual(&self, c: [f64; 3], h1: &mut [f64], h2: &mut [f64]) -> [f64; 3] {
        let hid = self.hidden;
        for j in 0..hid {
            let w = &self.w1[3 * j..3 * j + 3];
            h1[j] = relu(self.b1[j] + w[0] * c[0] + w[1] * c[1] + w[2] * c[2]);
        }
        for j in 0..hid {
            h2[j] = relu(self.b2[j] + dot(&self.w2[j * hid..(j + 1) * hid], h1));
        }
        let mut out = [0.0; 3];
        for (o, v) in out.iter_mut().enumerate() {
            *v = c[o] + self.b3[o] + dot(&self.w3[o * hid..(o + 1) * hid], h2);
        }
        out
    }

    /// `Φ(c) = clamp(c + η(c), 0, 1)`.
    pub fn apply(&self, c: [f64; 3]) -> [f64; 3] {
        self.apply_with(c, &mut OperatorScratch::new(self.hidden))
    }

    fn apply_with(&self, c: [f64; 3], s: &mut OperatorScratch) -> [f64; 3] {
        self.residual(c, &mut s.h1, &mut s.h2).map(|v| v.clamp(0.0, 1.0))
    }

    /// Applies the operator to every color.
    fn apply_all(&self, colors: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let mut scratch = OperatorScratch::new(self.hidden);
        colors.iter().map(|&c| self.apply_with(c, &mut scratch)).collect()
    }

    /// Backpropagates `g = dL/dΦ` at input `c`. Accumulates parameter
    /// gradients into `grad` and returns `dL/dc`. The clamp passes gradient
    /// only inside `[0, 1]` (boundary included).
    pub fn vjp(&self, c: [f64; 3], g: [f64; 3], grad: &mut ColorOperatorParams) -> [f64; 3] {
        let mut s = OperatorScratch::new(self.hidden);
        self.vjp_with(c, g, grad, &mut s)
    }

    fn vjp_with(&self, c: [f64; 3], g: [f64; 3], grad: &mut ColorOperatorParams, s: &mut OperatorScratch) -> [f64; 3] {
        let hid = self.hidden;
        let pre = self.residual(c, &mut s.h1, &mut s.h2);
        let mut d_out = [0.0; 3];
        for o in 0..3 {
            if (0.0..=1.0).contains(&pre[o]) {
                d_out[o] = g[o];
            }
        }
        if d_out == [0.0; 3] {
            return d_out;
        }
        // Output layer; the residual skip passes d_out straight to c.
        s.d2.iter_mut().for_each(|v| *v = 0.0);
        for o in 0..3 {
            let d = d_out[o];
            if d == 0.0 {
                continue;
            }
            grad.b3[o] += d;
            for j in 0..hid {
                grad.w3[o * hid + j] += d * s.h2[j];
                s.d2[j] += d * self.w3[o * hid + j];
            }
        }
        for j in 0..hid {
            if s.h2[j] <= 0.0 {
                s.d2[j] = 0.0;
            }
        }
        s.d1.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..hid {
            let d = s.d2[j];
            if d == 0.0 {
                continue;
            }
            grad.b2[j] += d;
            for i in 0..hid {
                grad.w2[j * hid + i] += d * s.h1[i];
                s.d1[i] += d * self.w2[j * hid + i];
            }
        }
        let mut dc = d_out;
        for j in 0..hid {
            if s.h1[j] <= 0.0 {
                continue;
            }
            let d = s.d1[j];
            grad.b1[j] += d;
            for i in 0..3 {
                grad.w1[3 * j + i] += d * c[i];
                dc[i] += d * self.w1[3 * j + i];
            }
        }
        dc
    }
}

struct OperatorScratch {
    h1: Vec<f64>,
    h2: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl OperatorScratch {
    fn new(hidden: usize) -> Self {
        Self { h1: vec![0.0; hidden], h2: vec![0.0; hidden], d1: vec![0.0; hidden], d2: vec![0.0; hidden] }
    }
}

/// Stand-alone convenience form of [`ColorOperatorParams::apply`].
pub fn apply_operator(op: &ColorOperatorParams, c: [f64; 3]) -> [f64; 3] {
    op.apply(c)
}

/// Mixes each color with its operator outputs:
/// `c_e = w₀·c + Σ_{k≥1} w_k·Φ_k(c)`.
///
/// `weights` is row-major `N × K` with `K = operators.len() + 1`; slot 0 is
/// the identity and passes the stored color unclamped. Evaluated as
/// `c + Σ_{k≥1} w_k (Φ_k(c) − c)`, which is the same mix for weights that
/// sum to one and reproduces `c` exactly when every `Φ_k(c) = c`.
pub fn mix_colors(colors: &[[f64; 3]], weights: &[f64], operators: &[ColorOperatorParams]) -> Result<Vec<[f64; 3]>> {
    let k = operators.len() + 1;
    if weights.len() != colors.len() * k {
        return Err(Error::DimensionMismatch {
            expected: format!("{} weights ({} colors × {k})", colors.len() * k, colors.len()),
            actual: format!("{}", weights.len()),
        });
    }
    let phi: Vec<Vec<[f64; 3]>> = operators.par_iter().map(|op| op.apply_all(colors)).collect();
    Ok(mix_from_outputs(colors, weights, &phi))
}

fn mix_from_outputs(colors: &[[f64; 3]], weights: &[f64], phi: &[Vec<[f64; 3]>]) -> Vec<[f64; 3]> {
    let k = phi.len() + 1;
    colors
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let w = &weights[i * k..(i + 1) * k];
            let mut out = c;
            for (j, outputs) in phi.iter().enumerate() {
                let p = outputs[i];
                for ch in 0..3 {
                    out[ch] += w[j + 1] * (p[ch] - c[ch]);
                }
            }
            out
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Parameter container

/// All trainable Stage-2 parameters. `K = operators.len() + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancerParams {
    pub encoder: EncoderParams,
    pub head: WeightHeadParams,
    pub operators: Vec<ColorOperatorParams>,
}

/// A named tensor view: `(name, dims, values)`.
pub type TensorView<'a> = (String, Vec<usize>, &'a [f64]);
/// An owned named tensor.
pub type Tensor = (String, Vec<usize>, Vec<f64>);

impl EnhancerParams {
    /// Seeded initialization for `k` slots (identity plus `k − 1` operators).
    pub fn init(k: usize, hidden: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("K = {k}: need the identity slot plus at least one operator")));
        }
        if hidden == 0 {
            return Err(invalid("operator hidden width must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(&mut rng);
        let head = WeightHeadParams::init(&mut rng, FEATURE_DIM, k);
        let operators = (1..k).map(|_| ColorOperatorParams::init(&mut rng, hidden)).collect();
        Ok(Self { encoder, head, operators })
    }

    pub fn k(&self) -> usize {
        self.operators.len() + 1
    }

    pub fn hidden(&self) -> usize {
        self.operators.first().map_or(0, |op| op.hidden)
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Named tensors in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (l, layer) in self.encoder.layers.iter().enumerate() {
            out.push((
                format!("encoder.{l}.weight"),
                vec![layer.out_channels, KERNEL, KERNEL, layer.in_channels],
                &layer.weight[..],
            ));
            out.push((format!("encoder.{l}.bias"), vec![layer.out_channels], &layer.bias[..]));
        }
        out.push(("head.weight".into(), vec![self.head.k, self.head.features], &self.head.weight[..]));
        out.push(("head.bias".into(), vec![self.head.k], &self.head.bias[..]));
        for (j, op) in self.operators.iter().enumerate() {
            let h = op.hidden;
            let k = j + 1;
            out.push((format!("operator.{k}.w1"), vec![h, 3], &op.w1[..]));
            out.push((format!("operator.{k}.b1"), vec![h], &op.b1[..]));
            out.push((format!("operator.{k}.w2"), vec![h, h], &op.w2[..]));
            out.push((format!("operator.{k}.b2"), vec![h], &op.b2[..]));
            out.push((format!("operator.{k}.w3"), vec![3, h], &op.w3[..]));
            out.push((format!("operator.{k}.b3"), vec![3], &op.b3[..]));
        }
        out
    }

    /// Visits every tensor mutably, in [`tensors`](Self::tensors) order.
    pub fn for_each_tensor_mut(&mut self, mut f: impl FnMut(&mut Vec<f64>)) {
        for layer in &mut self.encoder.layers {
            f(&mut layer.weight);
            f(&mut layer.bias);
        }
        f(&mut self.head.weight);
        f(&mut self.head.bias);
        for op in &mut self.operators {
            for t in [&mut op.w1, &mut op.b1, &mut op.w2, &mut op.b2, &mut op.w3, &mut op.b3] {
                f(t);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.2.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.2.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.param_count();
        if flat.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} parameters"),
                actual: format!("{}", flat.len()),
            });
        }
        let mut off = 0;
        self.for_each_tensor_mut(|t| {
            let len = t.len();
            t.copy_from_slice(&flat[off..off + len]);
            off += len;
        });
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.2.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn round_to_storage(&mut self) {
        self.for_each_tensor_mut(|t| t.iter_mut().for_each(|v| *v = *v as f32 as f64));
    }

    /// Rebuilds parameters from named tensors, checking every shape against
    /// the fixed architecture. Duplicate or unknown names are format errors.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        let mut map = tensor_map(tensors)?;
        let encoder = take_encoder(&mut map)?;
        let (hd, hw) = take(&mut map, "head.weight")?;
        if hd.len() != 2 || hd[1] != FEATURE_DIM {
            return Err(Error::Format(format!("head.weight has shape {hd:?}, expected [K, {FEATURE_DIM}]")));
        }
        let k = hd[0];
        if k < 2 {
            return Err(Error::Format(format!("K = {k}: need the identity slot plus at least one operator")));
        }
        let head =
            WeightHeadParams { features: FEATURE_DIM, k, weight: hw, bias: take_shaped(&mut map, "head.bias", &[k])? };
        let hidden = match map.get("operator.1.b1") {
            Some((d, _)) if d.len() == 1 && d[0] > 0 => d[0],
            _ => return Err(Error::Format("missing or malformed operator.1.b1".into())),
        };
        let mut operators = Vec::with_capacity(k - 1);
        for j in 1..k {
            let h = hidden;
            let mut get = |part: &str, dims: &[usize]| take_shaped(&mut map, &format!("operator.{j}.{part}"), dims);
            operators.push(ColorOperatorParams {
                hidden: h,
                w1: get("w1", &[h, 3])?,
                b1: get("b1", &[h])?,
                w2: get("w2", &[h, h])?,
                b2: get("b2", &[h])?,
                w3: get("w3", &[3, h])?,
                b3: get("b3", &[3])?,
            });
        }
        if let Some(name) = map.keys().next() {
            return Err(Error::Format(format!("unexpected tensor {name:?}")));
        }
        Ok(Self { encoder, head, operators })
    }
}

impl EncoderParams {
    /// Extracts the encoder tensors from a container, ignoring any others.
    pub fn from_tensors(tensors: Vec<Tensor>) -> Result<Self> {
        take_encoder(&mut tensor_map(tensors)?)
    }
}

type TensorMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;

fn tensor_map(tensors: Vec<Tensor>) -> Result<TensorMap> {
    let mut map = TensorMap::new();
    for (name, dims, data) in tensors {
        if map.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
    }
    Ok(map)
}

fn take(map: &mut TensorMap, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    map.remove(name).ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
}

fn take_shaped(map: &mut TensorMap, name: &str, dims: &[usize]) -> Result<Vec<f64>> {
    let (d, data) = take(map, name)?;
    if d != dims {
        return Err(Error::Format(format!("tensor {name:?} has shape {d:?}, expected {dims:?}")));
    }
    Ok(data)
}

fn take_encoder(map: &mut TensorMap) -> Result<EncoderParams> {
    let mut enc = EncoderParams::zeros();
    for (l, layer) in enc.layers.iter_mut().enumerate() {
        let dims = [layer.out_channels, KERNEL, KERNEL, layer.in_channels];
        layer.weight = take_shaped(map, &format!("encoder.{l}.weight"), &dims)?;
        layer.bias = take_shaped(map, &format!("encoder.{l}.bias"), &[layer.out_channels])?;
    }
    Ok(enc)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceConfig {
    pub iterations: usize,
    pub lr0: f64,
    /// Final learning rate as a fraction of `lr0` (cosine annealing).
    pub lr_floor_fraction: f64,
    pub k: usize,
    pub hidden: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub tile_px: usize,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            lr0: 0.002,
            lr_floor_fraction: 0.01,
            k: DEFAULT_K,
            hidden: DEFAULT_HIDDEN,
            loss: LossConfig::default(),
            seed: 0,
            tile_px: DEFAULT_TILE_PX,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid(format!("K = {}: need the identity slot plus at least one operator", self.k)));
        }
        if self.hidden == 0 || self.tile_px == 0 {
            return Err(invalid("hidden width and tile size must be positive"));
        }
        if !(self.lr0 > 0.0) || !(self.lr_floor_fraction > 0.0 && self.lr_floor_fraction <= 1.0) {
            return Err(invalid("learning rate must be positive with a floor fraction in (0, 1]"));
        }
        let e = self.loss.exposure_target;
        if !(e > 0.0 && e < 1.0) {
            return Err(invalid(format!("exposure target {e} outside (0, 1)")));
        }
        if self.loss.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0))
            || !(self.loss.saturation_threshold >= 0.0)
            || !(self.loss.contrast_gamma > 0.0)
        {
            return Err(invalid("loss weights must be non-negative, τ ≥ 0 and γ > 0"));
        }
        Ok(())
    }
}

/// Everything computed by one forward evaluation.
pub struct Stage2Forward {
    trace: EncoderTrace,
    taps: Vec<Taps>,
    /// Softmaxed weight map `H' × W' × K`.
    pub map: ImageBuffer,
    /// Per-primitive weights, row-major `N × K`.
    pub weights: Vec<f64>,
    /// `Φ_k(c_i)` for each operator `k ≥ 1`.
    phi: Vec<Vec<[f64; 3]>>,
    pub colors: Vec<[f64; 3]>,
    pub render: ImageBuffer,
}

/// A Stage-2 objective with frozen geometry: the Stage-1 set, its tiles and
/// render (the guide), and the loss configuration.
pub struct Stage2Problem {
    set: GaussianSet,
    tiles: TileIndex,
    opts: RasterOptions,
    guide: ImageBuffer,
    loss: LossConfig,
}

impl Stage2Problem {
    pub fn new(set: &GaussianSet, opts: RasterOptions, loss: LossConfig) -> Result<Self> {
        set.validate()?;
        if set.width == 0 || set.height == 0 {
            return Err(invalid("cannot enhance a zero-area viewport"));
        }
        let tiles = build_tiles(set, &opts)?;
        let guide = render_tiles(set, &tiles, &opts);
        Ok(Self { set: set.clone(), tiles, opts, guide, loss })
    }

    /// The fixed Stage-1 render.
    pub fn guide(&self) -> &ImageBuffer {
        &self.guide
    }

    pub fn set(&self) -> &GaussianSet {
        &self.set
    }

    fn render_colors(&self, colors: &[[f64; 3]]) -> ImageBuffer {
        let mut s = self.set.clone();
        s.color = colors.to_vec();
        render_tiles(&s, &self.tiles, &self.opts)
    }

    fn check(&self, params: &EnhancerParams) -> Result<()> {
        if params.operators.is_empty() || params.head.k != params.k() {
            return Err(invalid(format!(
                "head has {} channels but there are {} operators plus identity",
                params.head.k,
                params.operators.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &EnhancerParams) -> Result<Stage2Forward> {
        self.check(params)?;
        let trace = encode(&self.guide, &params.encoder)?;
        let logits = weight_logits(trace.features(), &params.head)?;
        let map = softmax_map(&logits);
        let k = params.k();
        let viewport = (self.set.width as usize, self.set.height as usize);
        let grid = (logits.width(), logits.height());
        let taps: Vec<Taps> = self.set.mu.iter().map(|&mu| bilinear_taps(mu, viewport, grid)).collect();
        let mut weights = vec![0.0; self.set.len() * k];
        for (t, w) in taps.iter().zip(weights.chunks_exact_mut(k)) {
            sample_logits(&logits, t, w);
            softmax_in_place(w);
        }
        let phi: Vec<Vec<[f64; 3]>> = params.operators.par_iter().map(|op| op.apply_all(&self.set.color)).collect();
        let colors = mix_from_outputs(&self.set.color, &weights, &phi);
        let render = self.render_colors(&colors);
        Ok(Stage2Forward { trace, taps, map, weights, phi, colors, render })
    }

    pub fn loss(&self, params: &EnhancerParams) -> Result<LossBreakdown> {
        let fwd = self.forward(params)?;
        Ok(total_loss(&fwd.render, &self.guide, &fwd.map, &self.loss)?.0)
    }

    /// Total loss and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, params: &EnhancerParams) -> Result<(LossBreakdown, EnhancerParams)> {
        let fwd = self.forward(params)?;
        let (breakdown, grads) = total_loss(&fwd.render, &self.guide, &fwd.map, &self.loss)?;
        let g_colors = backward(&self.set, &self.tiles, &grads.image, &self.opts, true)?.d_color;
        let k = params.k();
        let n = self.set.len();
        let mut grad = params.zeros_like();

        // Mixing: dL/dw_k = g·(Φ_k − c), dL/dΦ_k = w_k·g.
        let mut g_weights = vec![0.0; n * k];
        for i in 0..n {
            let (g, c) = (g_colors[i], self.set.color[i]);
            for j in 1..k {
                let p = fwd.phi[j - 1][i];
                g_weights[i * k + j] = (0..3).map(|ch| g[ch] * (p[ch] - c[ch])).sum();
            }
        }
        let set = &self.set;
        let weights = &fwd.weights;
        params.operators.par_iter().zip(grad.operators.par_iter_mut()).enumerate().for_each(|(j, (op, gop))| {
            let slot = j + 1;
            let mut scratch = OperatorScratch::new(op.hidden);
            for i in 0..n {
                let w = weights[i * k + slot];
                let g = g_colors[i];
                let up = [w * g[0], w * g[1], w * g[2]];
                if up != [0.0; 3] {
                    op.vjp_with(set.color[i], up, gop, &mut scratch);
                }
            }
        });

        // Softmax and bilinear sampling back onto the logit grid, plus the
        // map regularizer through the per-pixel softmax.
        let features = fwd.trace.features();
        let mut g_logits = ImageBuffer::zeros(features.width(), features.height(), k);
        let mut dl = vec![0.0; k];
        for i in 0..n {
            dl.iter_mut().for_each(|v| *v = 0.0);
            softmax_vjp(&weights[i * k..(i + 1) * k], &g_weights[i * k..(i + 1) * k], &mut dl);
            let t = &fwd.taps[i];
            for (&idx, &wt) in t.idx.iter().zip(&t.wt) {
                for (o, &d) in g_logits.data_mut()[idx * k..(idx + 1) * k].iter_mut().zip(&dl) {
                    *o += wt * d;
                }
            }
        }
        for ((m, gm), gl) in fwd
            .map
            .data()
            .chunks_exact(k)
            .zip(grads.map.data().chunks_exact(k))
            .zip(g_logits.data_mut().chunks_exact_mut(k))
        {
            softmax_vjp(m, gm, gl);
        }

        let g_features = head_backward(&params.head, features, &g_logits, &mut grad.head);
        encoder_backward(&params.encoder, &fwd.trace, g_features, &mut grad.encoder);
        if !grad.all_finite() {
            return Err(Error::NonFinite("enhancer gradients"));
        }
        Ok((breakdown, grad))
    }

    /// `set` with its colors replaced by the enhanced ones.
    pub fn bake(&self, params: &EnhancerParams) -> Result<GaussianSet> {
        let fwd = self.forward(params)?;
        let mut out = self.set.clone();
        out.color = fwd.colors.iter().map(|c| c.map(|v| v as f32 as f64)).collect();
        Ok(out)
    }

    /// Per-slot weight maps at full resolution (one 1-channel image per
    /// slot, slot 0 the identity), sampled exactly like the primitives.
    pub fn weight_map_images(&self, params: &EnhancerParams) -> Result<Vec<ImageBuffer>> {
        self.check(params)?;
        let features = extract_features(&self.guide, &params.encoder)?;
        let logits = weight_logits(&features, &params.head)?;
        let (w, h) = (self.set.width as usize, self.set.height as usize);
        let centers: Vec<[f64; 2]> = (0..w * h).map(|p| [(p % w) as f64 + 0.5, (p / w) as f64 + 0.5]).collect();
        let weights = sample_weights(&logits, &centers, w, h)?;
        let k = params.k();
        (0..k).map(|slot| ImageBuffer::from_vec(w, h, 1, (0..w * h).map(|p| weights[p * k + slot]).collect())).collect()
    }

    /// Renders with every primitive passed through a single slot: slot 0 is
    /// the unchanged render, slot `k ≥ 1` applies operator `k` globally.
    pub fn operator_renders(&self, params: &EnhancerParams) -> Result<Vec<ImageBuffer>> {
        self.check(params)?;
        let mut out = vec![self.guide.clone()];
        for op in &params.operators {
            let colors = op.apply_all(&self.set.color);
            out.push(self.render_colors(&colors));
        }
        Ok(out)
    }
}

/// Per-iteration report from [`enhance`].
pub struct EnhanceProgress<'a> {
    pub iter: usize,
    pub lr: f64,
    pub breakdown: &'a LossBreakdown,
}

/// Stage-2 training from freshly initialized parameters.
///
/// Returns the input set with enhanced colors baked in (geometry and
/// opacity untouched) and the trained parameters, both rounded to `f32`
/// storage precision.
pub fn enhance(
    set: &GaussianSet,
    cfg: &EnhanceConfig,
    progress: impl FnMut(&EnhanceProgress),
) -> Result<(GaussianSet, EnhancerParams)> {
    cfg.validate()?;
    let params = EnhancerParams::init(cfg.k, cfg.hidden, cfg.seed)?;
    enhance_from(set, cfg, params, progress)
}

/// Stage-2 training starting from `params` (for example a loaded encoder).
pub fn enhance_from(
    set: &GaussianSet,
    cfg: &EnhanceConfig,
    mut params: EnhancerParams,
    mut progress: impl FnMut(&EnhanceProgress),
) -> Result<(GaussianSet, EnhancerParams)> {
    cfg.validate()?;
    if params.k() != cfg.k {
        return Err(invalid(format!("parameters have K = {} but the config asks for {}", params.k(), cfg.k)));
    }
    let problem = Stage2Problem::new(set, RasterOptions::production(cfg.tile_px), cfg.loss.clone())?;
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len());
    for iter in 0..cfg.iterations {
        let lr = lr_schedule_cosine(cfg.lr0, iter, cfg.iterations, cfg.lr_floor_fraction);
        let (breakdown, grad) = problem.loss_and_grad(&params)?;
        adam_step(&mut flat, &grad.to_flat(), &mut adam, lr)?;
        params.assign_flat(&flat)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("enhancer parameters"));
        }
        progress(&EnhanceProgress { iter, lr, breakdown: &breakdown });
    }
    params.round_to_storage();
    let enhanced = problem.bake(&params)?;
    Ok((enhanced, params))
}
