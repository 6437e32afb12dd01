//! Layer kernels and the sequential [`Network`] built from them.
//!
//! All kernels work on batches: the leading axis of every activation tensor
//! is the sample index, and images are laid out `[N, H, W, C]`. Convolution
//! and pooling also accept a single unbatched `[H, W, C]` image and then
//! return an unbatched result.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{gemm, Tensor};

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One entry of a sequential architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// Valid cross-correlation, stride 1, square `kernel`.
    Conv2d {
        kernel: usize,
        filters: usize,
    },
    /// Non-overlapping max pooling with window and stride `size`.
    MaxPool2d {
        size: usize,
    },
    Flatten,
    Dense {
        units: usize,
    },
    Relu,
    /// Inverted dropout with drop probability `rate`.
    Dropout {
        rate: f64,
    },
    Softmax,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d { kernel, filters } => {
                let [h, w, _c] = image_dims(input)?;
                if kernel == 0 || filters == 0 {
                    return Err(Error::config("conv2d kernel and filter count must be >= 1"));
                }
                if kernel > h || kernel > w {
                    return Err(Error::shape(format!(
                        "conv2d kernel {kernel}x{kernel} larger than input {h}x{w}"
                    )));
                }
                Ok(vec![h - kernel + 1, w - kernel + 1, filters])
            }
            LayerSpec::MaxPool2d { size } => {
                let [h, w, c] = image_dims(input)?;
                if size == 0 || h < size || w < size {
                    return Err(Error::shape(format!(
                        "maxpool window {size} does not fit input {h}x{w}"
                    )));
                }
                Ok(vec![h / size, w / size, c])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return Err(Error::shape(format!(
                        "dense layer expects a flat input, got {input:?}"
                    )));
                }
                if units == 0 {
                    return Err(Error::config("dense layer needs at least one unit"));
                }
                Ok(vec![units])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Dropout { rate } => {
                check_dropout_rate(rate)?;
                Ok(input.to_vec())
            }
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::shape(format!(
                        "softmax expects a flat input, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv2d { kernel, filters } => {
                write!(f, "conv2d {kernel}x{kernel}, {filters} filters")
            }
            LayerSpec::MaxPool2d { size } => write!(f, "maxpool2d {size}x{size}"),
            LayerSpec::Flatten => write!(f, "flatten"),
            LayerSpec::Dense { units } => write!(f, "dense {units}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::Dropout { rate } => write!(f, "dropout p={rate}"),
            LayerSpec::Softmax => write!(f, "softmax"),
        }
    }
}

/// Knobs for the two-convolution classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnOptions {
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv2_filters: usize,
    pub conv2_kernel: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
}

impl Default for CnnOptions {
    fn default() -> Self {
        CnnOptions {
            conv1_filters: 32,
            conv1_kernel: 3,
            conv2_filters: 16,
            conv2_kernel: 5,
            conv_dropout: 0.25,
            dense_dropout: 0.5,
        }
    }
}

impl CnnOptions {
    /// conv → relu → conv → relu → maxpool → dropout → flatten →
    /// dense 128 → relu → dropout → dense 50 → relu → dropout → dense 10 → softmax.
    pub fn layers(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                kernel: self.conv1_kernel,
                filters: self.conv1_filters,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                kernel: self.conv2_kernel,
                filters: self.conv2_filters,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Dropout {
                rate: self.conv_dropout,
            },
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 128 },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                rate: self.dense_dropout,
            },
            LayerSpec::Dense { units: 50 },
            LayerSpec::Relu,
            LayerSpec::Dropout {
                rate: self.dense_dropout,
            },
            LayerSpec::Dense { units: 10 },
            LayerSpec::Softmax,
        ]
    }
}

/// MNIST image shape, `[28, 28, 1]`.
pub const MNIST_INPUT: [usize; 3] = [28, 28, 1];

fn image_dims(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::shape(format!(
            "expected an [H, W, C] image, got {shape:?}"
        ))),
    }
}

/// Splits an image tensor into (batch, h, w, c, was_batched).
fn batch_image_dims(t: &Tensor) -> Result<(usize, usize, usize, usize, bool)> {
    match *t.shape() {
        [n, h, w, c] => Ok((n, h, w, c, true)),
        [h, w, c] => Ok((1, h, w, c, false)),
        _ => Err(Error::shape(format!(
            "expected [N, H, W, C] or [H, W, C], got {:?}",
            t.shape()
        ))),
    }
}

/// Splits a feature tensor into (batch, features, was_batched).
fn batch_vector_dims(t: &Tensor) -> Result<(usize, usize, bool)> {
    match *t.shape() {
        [n, f] => Ok((n, f, true)),
        [f] => Ok((1, f, false)),
        _ => Err(Error::shape(format!(
            "expected [N, F] or [F], got {:?}",
            t.shape()
        ))),
    }
}

fn image_shape(n: usize, h: usize, w: usize, c: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![n, h, w, c]
    } else {
        vec![h, w, c]
    }
}

fn check_dropout_rate(rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::config(format!("dropout rate {rate} outside [0, 1)")))
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    f: usize,
    oh: usize,
    ow: usize,
    batched: bool,
}

impl ConvGeometry {
    fn new(input: &Tensor, weights: &Tensor) -> Result<Self> {
        let (n, h, w, c, batched) = batch_image_dims(input)?;
        let (k, kc, f) = match *weights.shape() {
            [kh, kw, kc, f] if kh == kw => (kh, kc, f),
            _ => {
                return Err(Error::shape(format!(
                    "conv weights must be [k, k, C, F], got {:?}",
                    weights.shape()
                )))
            }
        };
        if kc != c {
            return Err(Error::shape(format!(
                "conv weights expect {kc} input channels, input has {c}"
            )));
        }
        if k > h || k > w {
            return Err(Error::shape(format!(
                "conv kernel {k}x{k} larger than input {h}x{w}"
            )));
        }
        Ok(ConvGeometry {
            n,
            h,
            w,
            c,
            k,
            f,
            oh: h - k + 1,
            ow: w - k + 1,
            batched,
        })
    }

    fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image into `[positions, k*k*C]` rows ordered (dy, dx, c).
    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (k, c, w, patch) = (self.k, self.c, self.w, self.patch());
        for y in 0..self.oh {
            for x in 0..self.ow {
                let row = &mut cols[(y * self.ow + x) * patch..][..patch];
                for dy in 0..k {
                    let src = ((y + dy) * w + x) * c;
                    row[dy * k * c..(dy + 1) * k * c].copy_from_slice(&image[src..src + k * c]);
                }
            }
        }
    }

    /// Geometry of the input-gradient pass: a full correlation of the
    /// zero-padded output gradient with the flipped kernel, producing `H×W×C`.
    fn adjoint(&self) -> ConvGeometry {
        let pad = self.k - 1;
        ConvGeometry {
            n: self.n,
            h: self.oh + 2 * pad,
            w: self.ow + 2 * pad,
            c: self.f,
            k: self.k,
            f: self.c,
            oh: self.h,
            ow: self.w,
            batched: self.batched,
        }
    }

    /// Writes one output-gradient image into the interior of a zeroed
    /// buffer padded by `k - 1` on every side.
    fn pad_into(&self, grad: &[f64], padded: &mut [f64]) {
        let pad = self.k - 1;
        let row = self.ow * self.f;
        let padded_w = self.ow + 2 * pad;
        for y in 0..self.oh {
            let dst = ((y + pad) * padded_w + pad) * self.f;
            padded[dst..dst + row].copy_from_slice(&grad[y * row..(y + 1) * row]);
        }
    }

    /// `[k, k, C, F]` weights rotated by 180 degrees and re-laid out as
    /// `[k, k, F, C]`, the kernel of the adjoint correlation.
    fn flipped(&self, weights: &[f64]) -> Vec<f64> {
        let (k, c, f) = (self.k, self.c, self.f);
        let mut out = vec![0.0; weights.len()];
        for dy in 0..k {
            for dx in 0..k {
                for ci in 0..c {
                    for fi in 0..f {
                        let src = ((dy * k + dx) * c + ci) * f + fi;
                        let dst = (((k - 1 - dy) * k + (k - 1 - dx)) * f + fi) * c + ci;
                        out[dst] = weights[src];
                    }
                }
            }
        }
        out
    }
}

/// Valid, stride-1 cross-correlation.
///
/// `input` is `[N, H, W, C]` (or `[H, W, C]`), `weights` is `[k, k, C, F]`
/// and `bias` is `[F]`; the result is `[N, H-k+1, W-k+1, F]`.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weights)?;
    if bias.shape() != [g.f] {
        return Err(Error::shape(format!(
            "conv bias must be [{}], got {:?}",
            g.f,
            bias.shape()
        )));
    }
    let (patch, positions) = (g.patch(), g.positions());
    let in_stride = g.h * g.w * g.c;
    let out_stride = positions * g.f;
    let mut out = vec![0.0; g.n * out_stride];
    let mut cols = vec![0.0; positions * patch];
    for s in 0..g.n {
        g.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let dst = &mut out[s * out_stride..(s + 1) * out_stride];
        for row in dst.chunks_exact_mut(g.f) {
            row.copy_from_slice(bias.data());
        }
        gemm(
            positions,
            patch,
            g.f,
            &cols,
            false,
            weights.data(),
            false,
            dst,
            1.0,
        );
    }
    Tensor::new(image_shape(g.n, g.oh, g.ow, g.f, g.batched), out)
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward pass of [`conv2d_forward`], given the forward input and the
/// gradient of the loss with respect to the forward output.
pub fn conv2d_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_impl(input, weights, grad_out, true)
}

/// With `want_input` off the input gradient is returned as zeros.
fn conv2d_backward_impl(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weights)?;
    let expected = image_shape(g.n, g.oh, g.ow, g.f, g.batched);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::shape(format!(
            "conv output gradient must be {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let (patch, positions) = (g.patch(), g.positions());
    let in_stride = g.h * g.w * g.c;
    let out_stride = positions * g.f;
    let adj = g.adjoint();
    let flipped = g.flipped(weights.data());
    let mut grad_w = vec![0.0; patch * g.f];
    let mut grad_b = vec![0.0; g.f];
    let mut grad_in = vec![0.0; g.n * in_stride];
    let mut cols = vec![0.0; positions * patch];
    let mut padded = vec![0.0; adj.h * adj.w * adj.c];
    let mut adj_cols = vec![0.0; adj.positions() * adj.patch()];
    for s in 0..g.n {
        let go = &grad_out.data()[s * out_stride..(s + 1) * out_stride];
        g.im2col(&input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        gemm(
            patch,
            positions,
            g.f,
            &cols,
            true,
            go,
            false,
            &mut grad_w,
            1.0,
        );
        for row in go.chunks_exact(g.f) {
            for (b, v) in grad_b.iter_mut().zip(row) {
                *b += v;
            }
        }
        if !want_input {
            continue;
        }
        g.pad_into(go, &mut padded);
        adj.im2col(&padded, &mut adj_cols);
        let dst = &mut grad_in[s * in_stride..(s + 1) * in_stride];
        gemm(
            adj.positions(),
            adj.patch(),
            g.c,
            &adj_cols,
            false,
            &flipped,
            false,
            dst,
            0.0,
        );
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new(weights.shape().to_vec(), grad_w)?,
        bias: Tensor::new(vec![g.f], grad_b)?,
    })
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

/// Output of [`maxpool2d_forward`]: pooled values plus, for every output
/// element, the flat input index it was taken from.
#[derive(Debug, Clone)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// Non-overlapping max pooling with window and stride `size`. Ties go to
/// the first cell in row-major window order.
pub fn maxpool2d_forward(input: &Tensor, size: usize) -> Result<Pooled> {
    let (n, h, w, c, batched) = batch_image_dims(input)?;
    if size == 0 || h < size || w < size {
        return Err(Error::shape(format!(
            "maxpool window {size} does not fit input {h}x{w}"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let data = input.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut argmax = Vec::with_capacity(n * oh * ow * c);
    for s in 0..n {
        let base = s * h * w * c;
        for y in 0..oh {
            for x in 0..ow {
                for ch in 0..c {
                    let mut best_idx = base + ((y * size) * w + x * size) * c + ch;
                    let mut best = data[best_idx];
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + ((y * size + dy) * w + x * size + dx) * c + ch;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(image_shape(n, oh, ow, c, batched), out)?,
        argmax,
    })
}

/// Routes each output gradient to the input cell that won the max.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(format!(
            "maxpool gradient has {} elements, forward produced {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        g[idx] += v;
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

fn dense_dims(input: &Tensor, weights: &Tensor) -> Result<(usize, usize, usize, bool)> {
    let (n, features, batched) = batch_vector_dims(input)?;
    let (m, k) = weights.dims2()?;
    if k != features {
        return Err(Error::shape(format!(
            "dense weights {:?} do not accept {features} inputs",
            weights.shape()
        )));
    }
    Ok((n, features, m, batched))
}

/// `y = W·x + b` for every row `x` of `input`; `weights` is `[m, n]`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, features, m, batched) = dense_dims(input, weights)?;
    if bias.shape() != [m] {
        return Err(Error::shape(format!(
            "dense bias must be [{m}], got {:?}",
            bias.shape()
        )));
    }
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    gemm(
        n,
        features,
        m,
        input.data(),
        false,
        weights.data(),
        true,
        &mut out,
        1.0,
    );
    let shape = if batched { vec![n, m] } else { vec![m] };
    Tensor::new(shape, out)
}

#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Backward of [`dense_forward`]: `Wᵀ·g`, `g ⊗ x` and `g`, summed over the batch.
pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let (n, features, m, _) = dense_dims(input, weights)?;
    if grad_out.len() != n * m {
        return Err(Error::shape(format!(
            "dense output gradient {:?} does not match batch {n} x {m}",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut grad_w = vec![0.0; m * features];
    gemm(
        m,
        n,
        features,
        g,
        true,
        input.data(),
        false,
        &mut grad_w,
        0.0,
    );
    let mut grad_in = vec![0.0; n * features];
    gemm(
        n,
        m,
        features,
        g,
        false,
        weights.data(),
        false,
        &mut grad_in,
        0.0,
    );
    let mut grad_b = vec![0.0; m];
    for row in g.chunks_exact(m) {
        for (b, v) in grad_b.iter_mut().zip(row) {
            *b += v;
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(input.shape().to_vec(), grad_in)?,
        weights: Tensor::new(vec![m, features], grad_w)?,
        bias: Tensor::new(vec![m], grad_b)?,
    })
}

// ---------------------------------------------------------------------------
// Pointwise layers
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Passes gradient only where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "relu gradient {:?} vs input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Inverted dropout. In train mode returns the output and the per-element
/// multiplier (0 or `1/(1-rate)`); in eval mode the input is returned as is.
pub fn dropout(
    x: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    check_dropout_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, Some(mask)))
}

pub fn dropout_backward(mask: Option<&[f64]>, grad_out: &Tensor) -> Result<Tensor> {
    match mask {
        None => Ok(grad_out.clone()),
        Some(mask) if mask.len() == grad_out.len() => {
            let data = grad_out
                .data()
                .iter()
                .zip(mask)
                .map(|(g, m)| g * m)
                .collect();
            Tensor::new(grad_out.shape().to_vec(), data)
        }
        Some(mask) => Err(Error::shape(format!(
            "dropout mask has {} elements, gradient {:?}",
            mask.len(),
            grad_out.shape()
        ))),
    }
}

/// Numerically stable softmax over the last axis of a `[N, F]` or `[F]` tensor.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    let (_, features, _) = batch_vector_dims(z)?;
    let mut out = z.data().to_vec();
    for row in out.chunks_exact_mut(features) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(z.shape().to_vec(), out)
}

/// Vector-Jacobian product of softmax given its output `s`:
/// `s ⊙ (g − Σ g⊙s)` per row.
pub fn softmax_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(Error::shape(format!(
            "softmax gradient {:?} vs output {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }
    let (_, features, _) = batch_vector_dims(output)?;
    let mut out = vec![0.0; output.len()];
    for ((o, s), g) in out
        .chunks_exact_mut(features)
        .zip(output.data().chunks_exact(features))
        .zip(grad_out.data().chunks_exact(features))
    {
        let inner: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((o, &s), &g) in o.iter_mut().zip(s).zip(g) {
            *o = s * (g - inner);
        }
    }
    Tensor::new(output.shape().to_vec(), out)
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct Layer {
    spec: LayerSpec,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    /// Index of the weight tensor in `params`; the bias follows it.
    param_index: Option<usize>,
}

/// Per-layer state captured by [`Network::forward`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    entries: Vec<CacheEntry>,
}

#[derive(Debug)]
enum CacheEntry {
    /// Layers whose backward needs the forward input (conv, dense, relu).
    Input(Tensor),
    Pool {
        input_shape: Vec<usize>,
        argmax: Vec<usize>,
    },
    Flatten {
        input_shape: Vec<usize>,
    },
    Dropout(Option<Vec<f64>>),
    Softmax(Tensor),
}

/// A strictly sequential network with its parameters and their gradients.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<Tensor>,
    grads: Vec<Tensor>,
}

impl Network {
    /// Builds the network, checking that layer shapes compose and drawing
    /// initial weights from `rng`. Weights feeding a ReLU use a He normal
    /// (std `sqrt(2/fan_in)`), others `sqrt(1/fan_in)`; biases start at zero.
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, rng: &mut SeededRng) -> Result<Self> {
        let mut net = Network::with_zero_params(input_shape, specs)?;
        for i in 0..net.layers.len() {
            let Some(p) = net.layers[i].param_index else {
                continue;
            };
            let feeds_relu = net.layers[i + 1..]
                .iter()
                .find(|l| !matches!(l.spec, LayerSpec::Dropout { .. }))
                .is_some_and(|l| l.spec == LayerSpec::Relu);
            let fan_in = match net.layers[i].spec {
                LayerSpec::Conv2d { kernel, .. } => kernel * kernel * net.layers[i].input_shape[2],
                _ => net.layers[i].input_shape[0],
            };
            let std = ((if feeds_relu { 2.0 } else { 1.0 }) / fan_in as f64).sqrt();
            for w in net.params[p].data_mut() {
                *w = std * rng.normal();
            }
        }
        Ok(net)
    }

    /// Same shape checks as [`Network::new`] with every parameter zeroed.
    pub fn with_zero_params(input_shape: &[usize], specs: Vec<LayerSpec>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::config(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        let mut shape = input_shape.to_vec();
        for (index, spec) in specs.into_iter().enumerate() {
            let output_shape = spec.output_shape(&shape).map_err(|e| e.at_layer(index))?;
            let param_index = match spec {
                LayerSpec::Conv2d { kernel, filters } => {
                    params.push(Tensor::zeros(&[kernel, kernel, shape[2], filters]));
                    params.push(Tensor::zeros(&[filters]));
                    Some(params.len() - 2)
                }
                LayerSpec::Dense { units } => {
                    params.push(Tensor::zeros(&[units, shape[0]]));
                    params.push(Tensor::zeros(&[units]));
                    Some(params.len() - 2)
                }
                _ => None,
            };
            layers.push(Layer {
                spec,
                input_shape: std::mem::replace(&mut shape, output_shape.clone()),
                output_shape,
                param_index,
            });
        }
        let grads = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
            params,
            grads,
        })
    }

    /// The default MNIST classifier for the given options.
    pub fn cnn(options: &CnnOptions, rng: &mut SeededRng) -> Result<Self> {
        Network::new(&MNIST_INPUT, options.layers(), rng)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map_or(&self.input_shape, |l| &l.output_shape)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> + '_ {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn spec(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.get(index).map(|l| &l.spec)
    }

    /// Per-sample output shape of layer `index`.
    pub fn layer_output_shape(&self, index: usize) -> Option<&[usize]> {
        self.layers.get(index).map(|l| l.output_shape.as_slice())
    }

    /// Per-sample input shape of layer `index`.
    pub fn layer_input_shape(&self, index: usize) -> Option<&[usize]> {
        self.layers.get(index).map(|l| l.input_shape.as_slice())
    }

    /// Weight and bias of a parameterised layer.
    pub fn layer_params(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        let p = self.layers.get(index)?.param_index?;
        Some((&self.params[p], &self.params[p + 1]))
    }

    pub fn layer_params_mut(&mut self, index: usize) -> Option<(&mut Tensor, &mut Tensor)> {
        let p = self.layers.get(index)?.param_index?;
        let (w, rest) = self.params[p..].split_at_mut(1);
        Some((&mut w[0], &mut rest[0]))
    }

    pub fn layer_grads(&self, index: usize) -> Option<(&Tensor, &Tensor)> {
        let p = self.layers.get(index)?.param_index?;
        Some((&self.grads[p], &self.grads[p + 1]))
    }

    /// Layer indices of the convolution layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// Number of scalar parameters in layer `index` (zero for parameter-free layers).
    pub fn layer_param_count(&self, index: usize) -> usize {
        self.layer_params(index)
            .map_or(0, |(w, b)| w.len() + b.len())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    /// Parameters and gradients together, for optimizer steps.
    pub fn params_and_grads(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.params, &self.grads)
    }

    /// Replaces all parameters; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::shape(
                "parameter tensors do not match the network architecture",
            ));
        }
        self.params = params;
        Ok(())
    }

    fn check_batch(&self, input: &Tensor) -> Result<usize> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "network expects [N, {}], got {:?}",
                self.input_shape
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(", "),
                shape
            )));
        }
        Ok(shape[0])
    }

    fn forward_layer(
        &self,
        index: usize,
        x: Tensor,
        mode: Mode,
        rng: &mut Option<&mut SeededRng>,
        keep_cache: bool,
    ) -> Result<(Tensor, Option<CacheEntry>)> {
        let layer = &self.layers[index];
        let n = x.shape()[0];
        let params = layer
            .param_index
            .map(|p| (&self.params[p], &self.params[p + 1]));
        let (out, entry) = match (&layer.spec, params) {
            (LayerSpec::Conv2d { .. }, Some((w, b))) => {
                let out = conv2d_forward(&x, w, b)?;
                (out, CacheEntry::Input(x))
            }
            (LayerSpec::Dense { .. }, Some((w, b))) => {
                let out = dense_forward(&x, w, b)?;
                (out, CacheEntry::Input(x))
            }
            (LayerSpec::MaxPool2d { size }, _) => {
                let pooled = maxpool2d_forward(&x, *size)?;
                let entry = CacheEntry::Pool {
                    input_shape: x.shape().to_vec(),
                    argmax: pooled.argmax,
                };
                (pooled.output, entry)
            }
            (LayerSpec::Flatten, _) => {
                let input_shape = x.shape().to_vec();
                let features = x.len() / n;
                (
                    x.reshape(&[n, features])?,
                    CacheEntry::Flatten { input_shape },
                )
            }
            (LayerSpec::Relu, _) => (relu(&x), CacheEntry::Input(x)),
            (LayerSpec::Dropout { rate }, _) => {
                if mode == Mode::Train && *rate > 0.0 {
                    let rng = rng.as_deref_mut().ok_or_else(|| {
                        Error::config("train-mode dropout needs a random generator")
                    })?;
                    let (out, mask) = dropout(&x, *rate, mode, rng)?;
                    (out, CacheEntry::Dropout(mask))
                } else {
                    (x, CacheEntry::Dropout(None))
                }
            }
            (LayerSpec::Softmax, _) => {
                let out = softmax(&x)?;
                let entry = if keep_cache {
                    CacheEntry::Softmax(out.clone())
                } else {
                    CacheEntry::Dropout(None)
                };
                (out, entry)
            }
            (spec, None) => return Err(Error::Internal(format!("{spec} layer has no parameters"))),
        };
        Ok((out, keep_cache.then_some(entry)))
    }

    /// Runs the whole network on a batch `[N, ...input_shape]`.
    ///
    /// `rng` drives dropout and is required in [`Mode::Train`] whenever a
    /// dropout layer has a nonzero rate.
    pub fn forward(
        &self,
        input: &Tensor,
        mode: Mode,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(Tensor, ForwardCache)> {
        self.check_batch(input)?;
        let mut x = input.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        for index in 0..self.layers.len() {
            let (out, entry) = self
                .forward_layer(index, x, mode, &mut rng, true)
                .map_err(|e| e.at_layer(index))?;
            entries.push(entry.expect("cache requested"));
            x = out;
        }
        Ok((x, ForwardCache { entries }))
    }

    /// Eval-mode forward without a cache.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_to(input, self.layers.len())
    }

    /// Eval-mode output after the first `count` layers.
    pub fn forward_to(&self, input: &Tensor, count: usize) -> Result<Tensor> {
        self.check_batch(input)?;
        if count > self.layers.len() {
            return Err(Error::domain(format!(
                "network has {} layers, asked for {count}",
                self.layers.len()
            )));
        }
        let mut x = input.clone();
        for index in 0..count {
            x = self
                .forward_layer(index, x, Mode::Eval, &mut None, false)
                .map_err(|e| e.at_layer(index))?
                .0;
        }
        Ok(x)
    }

    /// Backpropagates `grad_out` (gradient of the loss with respect to the
    /// network output), overwriting the stored parameter gradients.
    pub fn backward(&mut self, cache: ForwardCache, grad_out: &Tensor) -> Result<()> {
        self.backward_layers(cache.entries, grad_out.clone())
    }

    /// Like [`Network::backward`] but `grad_logits` is the gradient with
    /// respect to the input of a final softmax layer, which is skipped. This
    /// is the path used with the fused softmax/cross-entropy gradient.
    pub fn backward_from_logits(
        &mut self,
        mut cache: ForwardCache,
        grad_logits: &Tensor,
    ) -> Result<()> {
        match self.layers.last().map(|l| &l.spec) {
            Some(LayerSpec::Softmax) => {
                cache.entries.pop();
                self.backward_layers(cache.entries, grad_logits.clone())
            }
            _ => Err(Error::config("network does not end in a softmax layer")),
        }
    }

    fn backward_layers(&mut self, entries: Vec<CacheEntry>, mut grad: Tensor) -> Result<()> {
        if entries.len() > self.layers.len() {
            return Err(Error::shape(
                "forward cache does not belong to this network",
            ));
        }
        for t in &mut self.grads {
            t.fill(0.0);
        }
        for (index, entry) in entries.into_iter().enumerate().rev() {
            grad = self
                .backward_layer(index, entry, &grad)
                .map_err(|e| e.at_layer(index))?;
        }
        Ok(())
    }

    fn backward_layer(&mut self, index: usize, entry: CacheEntry, grad: &Tensor) -> Result<Tensor> {
        let layer = &self.layers[index];
        match (&layer.spec, entry) {
            (LayerSpec::Conv2d { .. }, CacheEntry::Input(x)) => {
                let p = layer.param_index.expect("conv has params");
                let g = conv2d_backward_impl(&x, &self.params[p], grad, index > 0)?;
                self.grads[p] = g.weights;
                self.grads[p + 1] = g.bias;
                Ok(g.input)
            }
            (LayerSpec::Dense { .. }, CacheEntry::Input(x)) => {
                let p = layer.param_index.expect("dense has params");
                let g = dense_backward(&x, &self.params[p], grad)?;
                self.grads[p] = g.weights;
                self.grads[p + 1] = g.bias;
                Ok(g.input)
            }
            (LayerSpec::Relu, CacheEntry::Input(x)) => relu_backward(&x, grad),
            (
                LayerSpec::MaxPool2d { .. },
                CacheEntry::Pool {
                    input_shape,
                    argmax,
                },
            ) => maxpool2d_backward(&input_shape, &argmax, grad),
            (LayerSpec::Flatten, CacheEntry::Flatten { input_shape }) => {
                grad.clone().reshape(&input_shape)
            }
            (LayerSpec::Dropout { .. }, CacheEntry::Dropout(mask)) => {
                dropout_backward(mask.as_deref(), grad)
            }
            (LayerSpec::Softmax, CacheEntry::Softmax(out)) => softmax_backward(&out, grad),
            (spec, _) => Err(Error::shape(format!(
                "forward cache entry does not match {spec} layer"
            ))),
        }
    }
}
