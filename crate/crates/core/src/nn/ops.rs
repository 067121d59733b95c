//! Operator kernels with hand-written gradients and cost formulas.
//!
//! Activations are batch-first: `[N, C, H, W]` for spatial operators and
//! `[N, F]` for dense ones. Shapes passed to schema/cost functions are
//! per-sample shapes (batch dimension stripped). All convolutions use
//! stride 1 and "same" padding.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Parameter, Tensor};
use crate::error::{Error, Result};

/// Channel expansion ratio of a depthwise-separable convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Expansion {
    Half,
    One,
    Two,
}

impl Expansion {
    pub fn ratio(self) -> f64 {
        match self {
            Expansion::Half => 0.5,
            Expansion::One => 1.0,
            Expansion::Two => 2.0,
        }
    }

    /// Intermediate channel count for `channels` inputs, at least one.
    pub fn mid_channels(self, channels: usize) -> usize {
        ((channels as f64 * self.ratio()).round() as usize).max(1)
    }

    pub fn from_ratio(r: f64) -> Option<Self> {
        match r {
            x if x == 0.5 => Some(Expansion::Half),
            x if x == 1.0 => Some(Expansion::One),
            x if x == 2.0 => Some(Expansion::Two),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperatorKind {
    Identity,
    /// Outputs zeros of the input shape. Only meaningful on a skip path.
    Zero,
    Dense { out_features: usize },
    Conv1x1 { out_channels: usize },
    Conv3x3 { out_channels: usize },
    /// Pointwise expand, ReLU, depthwise `kernel`x`kernel`, pointwise
    /// project back to the input channel count.
    DwSepConv { kernel: usize, expansion: Expansion },
    /// Average pooling. With `stride == 1` the window is centred and the
    /// spatial shape preserved; otherwise windows are unpadded.
    AvgPool { window: usize, stride: usize },
    /// Learnable per-channel scale and shift.
    AffineNorm,
    /// Per-sample normalization over all features, then a per-channel
    /// affine. Independent of the rest of the batch.
    LayerNorm,
    Relu,
    /// `[C, H, W] -> [C]` mean over the spatial dimensions.
    GlobalAvgPool,
    /// `[C, H, W] -> [C * H * W]`.
    Flatten,
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OperatorKind::Identity => write!(f, "identity"),
            OperatorKind::Zero => write!(f, "zero"),
            OperatorKind::Dense { out_features } => write!(f, "dense{out_features}"),
            OperatorKind::Conv1x1 { out_channels } => write!(f, "conv1x1({out_channels})"),
            OperatorKind::Conv3x3 { out_channels } => write!(f, "conv3x3({out_channels})"),
            OperatorKind::DwSepConv { kernel, expansion } => {
                write!(f, "dwsep{kernel}x{kernel}_e{}", expansion.ratio())
            }
            OperatorKind::AvgPool { window, stride } => write!(f, "avgpool{window}s{stride}"),
            OperatorKind::AffineNorm => write!(f, "affine"),
            OperatorKind::LayerNorm => write!(f, "layernorm"),
            OperatorKind::Relu => write!(f, "relu"),
            OperatorKind::GlobalAvgPool => write!(f, "gap"),
            OperatorKind::Flatten => write!(f, "flatten"),
        }
    }
}

/// Per-sample trainable-scalar count and FLOPs (1 MAC = 2 FLOPs).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl std::ops::Add for Cost {
    type Output = Cost;
    fn add(self, rhs: Cost) -> Cost {
        Cost {
            params: self.params + rhs.params,
            flops: self.flops + rhs.flops,
        }
    }
}

impl std::ops::AddAssign for Cost {
    fn add_assign(&mut self, rhs: Cost) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Cost {
    fn sum<I: Iterator<Item = Cost>>(iter: I) -> Cost {
        iter.fold(Cost::default(), |a, b| a + b)
    }
}

fn spatial(op: OperatorKind, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(
            op.to_string(),
            format!("expected [C, H, W] input, got rank {} shape {shape:?}", shape.len()),
        )),
    }
}

impl OperatorKind {
    pub fn is_parametric(self) -> bool {
        matches!(
            self,
            OperatorKind::Dense { .. }
                | OperatorKind::Conv1x1 { .. }
                | OperatorKind::Conv3x3 { .. }
                | OperatorKind::DwSepConv { .. }
                | OperatorKind::AffineNorm
                | OperatorKind::LayerNorm
        )
    }

    /// Convolution-like kernels that are followed by normalization and
    /// activation when used as a search candidate.
    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OperatorKind::Conv1x1 { .. } | OperatorKind::Conv3x3 { .. } | OperatorKind::DwSepConv { .. }
        )
    }

    pub fn output_shape(self, input: &[usize]) -> Result<Vec<usize>> {
        use OperatorKind::*;
        match self {
            Identity | Zero | Relu => Ok(input.to_vec()),
            AffineNorm | LayerNorm => {
                if input.is_empty() {
                    return Err(Error::shape(self.to_string(), "scalar input"));
                }
                Ok(input.to_vec())
            }
            Dense { out_features } => match input {
                &[_] => Ok(vec![out_features]),
                _ => Err(Error::shape(
                    self.to_string(),
                    format!("expected [F] input, got {input:?}"),
                )),
            },
            Conv1x1 { out_channels } | Conv3x3 { out_channels } => {
                let (_, h, w) = spatial(self, input)?;
                Ok(vec![out_channels, h, w])
            }
            DwSepConv { kernel, .. } => {
                if kernel % 2 == 0 {
                    return Err(Error::shape(self.to_string(), "kernel must be odd"));
                }
                spatial(self, input)?;
                Ok(input.to_vec())
            }
            AvgPool { window, stride } => {
                let (c, h, w) = spatial(self, input)?;
                if window == 0 || stride == 0 {
                    return Err(Error::shape(self.to_string(), "window and stride must be > 0"));
                }
                if stride == 1 {
                    if window % 2 == 0 {
                        return Err(Error::shape(self.to_string(), "stride-1 window must be odd"));
                    }
                    Ok(vec![c, h, w])
                } else {
                    if h < window || w < window {
                        return Err(Error::shape(
                            self.to_string(),
                            format!("spatial {h}x{w} smaller than window {window}"),
                        ));
                    }
                    Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
                }
            }
            GlobalAvgPool => {
                let (c, _, _) = spatial(self, input)?;
                Ok(vec![c])
            }
            Flatten => {
                let (c, h, w) = spatial(self, input)?;
                Ok(vec![c * h * w])
            }
        }
    }

    /// Parameter tensor shapes, in the order kernels expect them.
    pub fn param_shapes(self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        use OperatorKind::*;
        self.output_shape(input)?;
        Ok(match self {
            Identity | Zero | Relu | AvgPool { .. } | GlobalAvgPool | Flatten => vec![],
            AffineNorm | LayerNorm => vec![vec![input[0]], vec![input[0]]],
            Dense { out_features } => vec![vec![out_features, input[0]], vec![out_features]],
            Conv1x1 { out_channels } => vec![vec![out_channels, input[0], 1, 1], vec![out_channels]],
            Conv3x3 { out_channels } => vec![vec![out_channels, input[0], 3, 3], vec![out_channels]],
            DwSepConv { kernel, expansion } => {
                let c = input[0];
                let m = expansion.mid_channels(c);
                vec![
                    vec![m, c, 1, 1],
                    vec![m],
                    vec![m, 1, kernel, kernel],
                    vec![m],
                    vec![c, m, 1, 1],
                    vec![c],
                ]
            }
        })
    }

    /// Fresh parameters: He fan-in normal weights, zero biases and shifts,
    /// unit norm scales.
    pub fn init_params<R: Rng + ?Sized>(self, input: &[usize], rng: &mut R) -> Result<Vec<Parameter>> {
        let shapes = self.param_shapes(input)?;
        let mut out = Vec::with_capacity(shapes.len());
        for (i, shape) in shapes.iter().enumerate() {
            let value = match (self, i) {
                (OperatorKind::AffineNorm | OperatorKind::LayerNorm, 0) => Tensor::full(shape, 1.0),
                (_, i) if shape.len() >= 2 && i % 2 == 0 => {
                    let fan_in: usize = shape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("positive std");
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| normal.sample(rng))
                        .collect();
                    Tensor::new(shape.clone(), data)?
                }
                _ => Tensor::zeros(shape),
            };
            out.push(Parameter::new(value));
        }
        Ok(out)
    }

    pub fn cost(self, input: &[usize]) -> Result<Cost> {
        op_cost(self, input)
    }
}

/// Exact per-sample cost of `op` on an input of per-sample shape `input`.
pub fn op_cost(op: OperatorKind, input: &[usize]) -> Result<Cost> {
    use OperatorKind::*;
    let out = op.output_shape(input)?;
    let params: u64 = op
        .param_shapes(input)?
        .iter()
        .map(|s| s.iter().product::<usize>() as u64)
        .sum();
    let numel = |s: &[usize]| s.iter().product::<usize>() as u64;
    let flops = match op {
        Identity | Zero | Flatten => 0,
        Relu => numel(input),
        AffineNorm => 2 * numel(input),
        // mean, variance, normalize, affine
        LayerNorm => 7 * numel(input),
        Dense { out_features } => 2 * input[0] as u64 * out_features as u64,
        Conv1x1 { out_channels } => 2 * input[0] as u64 * out_channels as u64 * numel(&input[1..]),
        Conv3x3 { out_channels } => 18 * input[0] as u64 * out_channels as u64 * numel(&input[1..]),
        DwSepConv { kernel, expansion } => {
            let c = input[0] as u64;
            let m = expansion.mid_channels(input[0]) as u64;
            let hw = numel(&input[1..]);
            let k2 = (kernel * kernel) as u64;
            2 * c * m * hw + m * hw + 2 * k2 * m * hw + 2 * m * c * hw
        }
        AvgPool { window, .. } => (window * window) as u64 * numel(&out),
        GlobalAvgPool => numel(input),
    };
    Ok(Cost { params, flops })
}

fn check_input<P: AsRef<Tensor>>(op: OperatorKind, params: &[P], input: &Tensor) -> Result<Vec<usize>> {
    if input.shape().len() < 2 {
        return Err(Error::shape(op.to_string(), "input lacks a batch dimension"));
    }
    let sample = input.sample_shape();
    let shapes = op.param_shapes(sample)?;
    if shapes.len() != params.len() {
        return Err(Error::shape(
            op.to_string(),
            format!("expected {} parameter tensors, got {}", shapes.len(), params.len()),
        ));
    }
    for (i, (s, p)) in shapes.iter().zip(params).enumerate() {
        if p.as_ref().shape() != s.as_slice() {
            return Err(Error::shape(
                op.to_string(),
                format!("parameter {i} has shape {:?}, expected {s:?}", p.as_ref().shape()),
            ));
        }
    }
    let mut out = vec![input.batch()];
    out.extend(op.output_shape(sample)?);
    Ok(out)
}

/// Evaluate `op` on a batch. Pure: identical arguments give bitwise
/// identical results, and each sample is computed independently of the
/// rest of the batch.
pub fn forward<P: AsRef<Tensor>>(op: OperatorKind, params: &[P], input: &Tensor) -> Result<Tensor> {
    use OperatorKind::*;
    let out_shape = check_input(op, params, input)?;
    let p = |i: usize| params[i].as_ref().data();
    let x = input.data();
    let n = input.batch();
    let data = match op {
        Identity => return Ok(input.clone()),
        Flatten => x.to_vec(),
        Zero => vec![0.0; x.len()],
        Relu => x.iter().map(|&v| v.max(0.0)).collect(),
        AffineNorm => {
            let c = input.shape()[1];
            let inner = input.numel() / (n * c);
            let (scale, shift) = (p(0), p(1));
            let mut out = x.to_vec();
            for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
                let ch = chunk_idx % c;
                for v in chunk {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
            out
        }
        LayerNorm => {
            let c = input.shape()[1];
            let d = input.numel() / n;
            let inner = d / c;
            let (scale, shift) = (p(0), p(1));
            let mut out = Vec::with_capacity(x.len());
            for xs in x.chunks(d) {
                let (mean, inv) = moments(xs);
                for (i, &v) in xs.iter().enumerate() {
                    let ch = i / inner;
                    out.push((v - mean) * inv * scale[ch] + shift[ch]);
                }
            }
            out
        }
        Dense { out_features } => {
            let fin = input.shape()[1];
            let (w, b) = (p(0), p(1));
            let mut out = Vec::with_capacity(n * out_features);
            for xs in x.chunks(fin) {
                for o in 0..out_features {
                    let row = &w[o * fin..(o + 1) * fin];
                    out.push(b[o] + dot(row, xs));
                }
            }
            out
        }
        Conv1x1 { out_channels } | Conv3x3 { out_channels } => {
            let k = if matches!(op, Conv1x1 { .. }) { 1 } else { 3 };
            let (_, c, h, w) = dims4(input);
            conv2d(x, n, c, h, w, p(0), p(1), out_channels, k)
        }
        DwSepConv { kernel, expansion } => {
            let (_, c, h, w) = dims4(input);
            let m = expansion.mid_channels(c);
            let mut a = conv2d(x, n, c, h, w, p(0), p(1), m, 1);
            a.iter_mut().for_each(|v| *v = v.max(0.0));
            let d = depthwise(&a, n, m, h, w, p(2), p(3), kernel);
            conv2d(&d, n, m, h, w, p(4), p(5), c, 1)
        }
        AvgPool { window, stride } => {
            let (_, c, h, w) = dims4(input);
            avgpool_forward(x, n, c, h, w, window, stride, out_shape[2], out_shape[3])
        }
        GlobalAvgPool => {
            let (_, _, h, w) = dims4(input);
            let hw = h * w;
            x.chunks(hw).map(|plane| plane.iter().sum::<f64>() / hw as f64).collect()
        }
    };
    Tensor::new(out_shape, data)
}

/// Backpropagate `upstream` through `op`. Parameter gradients are summed
/// into `Parameter::grad`; the gradient with respect to `input` is
/// returned.
pub fn backward(op: OperatorKind, params: &mut [Parameter], input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    use OperatorKind::*;
    let out_shape = check_input(op, params, input)?;
    if upstream.shape() != out_shape.as_slice() {
        return Err(Error::shape(
            op.to_string(),
            format!("upstream gradient {:?} does not match output {:?}", upstream.shape(), out_shape),
        ));
    }
    let x = input.data();
    let g = upstream.data();
    let n = input.batch();
    let gin = match op {
        Identity => return Ok(upstream.clone()),
        Flatten => g.to_vec(),
        Zero => vec![0.0; x.len()],
        Relu => x.iter().zip(g).map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 }).collect(),
        AffineNorm => {
            let c = input.shape()[1];
            let inner = input.numel() / (n * c);
            let scale = params[0].value.data().to_vec();
            let mut gscale = vec![0.0; c];
            let mut gshift = vec![0.0; c];
            let mut gin = vec![0.0; x.len()];
            for (idx, ((xs, gs), gi)) in x
                .chunks(inner)
                .zip(g.chunks(inner))
                .zip(gin.chunks_mut(inner))
                .enumerate()
            {
                let ch = idx % c;
                gscale[ch] += dot(xs, gs);
                gshift[ch] += gs.iter().sum::<f64>();
                for (a, &b) in gi.iter_mut().zip(gs) {
                    *a = b * scale[ch];
                }
            }
            accumulate(&mut params[0], &gscale);
            accumulate(&mut params[1], &gshift);
            gin
        }
        LayerNorm => {
            let c = input.shape()[1];
            let d = input.numel() / n;
            let inner = d / c;
            let scale = params[0].value.data().to_vec();
            let mut gscale = vec![0.0; c];
            let mut gshift = vec![0.0; c];
            let mut gin = vec![0.0; x.len()];
            let mut xhat = vec![0.0; d];
            let mut gxhat = vec![0.0; d];
            for ((xs, gs), gi) in x.chunks(d).zip(g.chunks(d)).zip(gin.chunks_mut(d)) {
                let (mean, inv) = moments(xs);
                for i in 0..d {
                    let ch = i / inner;
                    xhat[i] = (xs[i] - mean) * inv;
                    gscale[ch] += gs[i] * xhat[i];
                    gshift[ch] += gs[i];
                    gxhat[i] = gs[i] * scale[ch];
                }
                let m1 = gxhat.iter().sum::<f64>() / d as f64;
                let m2 = dot(&gxhat, &xhat) / d as f64;
                for i in 0..d {
                    gi[i] = inv * (gxhat[i] - m1 - xhat[i] * m2);
                }
            }
            accumulate(&mut params[0], &gscale);
            accumulate(&mut params[1], &gshift);
            gin
        }
        Dense { out_features } => {
            let fin = input.shape()[1];
            let mut gw = vec![0.0; out_features * fin];
            let mut gb = vec![0.0; out_features];
            let mut gin = vec![0.0; x.len()];
            let w = params[0].value.data();
            for ((xs, gs), gi) in x.chunks(fin).zip(g.chunks(out_features)).zip(gin.chunks_mut(fin)) {
                for (o, &go) in gs.iter().enumerate() {
                    gb[o] += go;
                    axpy(go, xs, &mut gw[o * fin..(o + 1) * fin]);
                    axpy(go, &w[o * fin..(o + 1) * fin], gi);
                }
            }
            accumulate(&mut params[0], &gw);
            accumulate(&mut params[1], &gb);
            gin
        }
        Conv1x1 { out_channels } | Conv3x3 { out_channels } => {
            let k = if matches!(op, Conv1x1 { .. }) { 1 } else { 3 };
            let (_, c, h, w) = dims4(input);
            let mut gw = vec![0.0; out_channels * c * k * k];
            let mut gb = vec![0.0; out_channels];
            let gin = conv2d_backward(x, g, n, c, h, w, params[0].value.data(), out_channels, k, &mut gw, &mut gb);
            accumulate(&mut params[0], &gw);
            accumulate(&mut params[1], &gb);
            gin
        }
        DwSepConv { kernel, expansion } => {
            let (_, c, h, w) = dims4(input);
            let m = expansion.mid_channels(c);
            // Recompute the intermediate activations.
            let pre = conv2d(x, n, c, h, w, params[0].value.data(), params[1].value.data(), m, 1);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let d = depthwise(&act, n, m, h, w, params[2].value.data(), params[3].value.data(), kernel);

            let mut gw3 = vec![0.0; c * m];
            let mut gb3 = vec![0.0; c];
            let gd = conv2d_backward(&d, g, n, m, h, w, params[4].value.data(), c, 1, &mut gw3, &mut gb3);

            let mut gw2 = vec![0.0; m * kernel * kernel];
            let mut gb2 = vec![0.0; m];
            let mut gact =
                depthwise_backward(&act, &gd, n, m, h, w, params[2].value.data(), kernel, &mut gw2, &mut gb2);
            for (ga, &pv) in gact.iter_mut().zip(&pre) {
                if pv <= 0.0 {
                    *ga = 0.0;
                }
            }

            let mut gw1 = vec![0.0; m * c];
            let mut gb1 = vec![0.0; m];
            let gin = conv2d_backward(x, &gact, n, c, h, w, params[0].value.data(), m, 1, &mut gw1, &mut gb1);
            accumulate(&mut params[0], &gw1);
            accumulate(&mut params[1], &gb1);
            accumulate(&mut params[2], &gw2);
            accumulate(&mut params[3], &gb2);
            accumulate(&mut params[4], &gw3);
            accumulate(&mut params[5], &gb3);
            gin
        }
        AvgPool { window, stride } => {
            let (_, c, h, w) = dims4(input);
            avgpool_backward(g, n, c, h, w, window, stride, out_shape[2], out_shape[3])
        }
        GlobalAvgPool => {
            let (_, _, h, w) = dims4(input);
            let hw = h * w;
            let mut gin = vec![0.0; x.len()];
            for (plane, &gv) in gin.chunks_mut(hw).zip(g) {
                plane.fill(gv / hw as f64);
            }
            gin
        }
    };
    Tensor::new(input.shape().to_vec(), gin)
}

fn accumulate(p: &mut Parameter, g: &[f64]) {
    for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
        *a += b;
    }
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Valid output range along one axis for kernel offset `d` (may be negative).
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(hi), hi)
}

const NORM_EPS: f64 = 1e-5;

/// Mean and inverse standard deviation of one sample.
fn moments(xs: &[f64]) -> (f64, f64) {
    let d = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / d;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + NORM_EPS).sqrt())
}

/// `[N, C, HW] -> [C, N * HW]`.
fn to_channel_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]
                .copy_from_slice(&x[(b * c + ch) * hw..(b * c + ch + 1) * hw]);
        }
    }
    out
}

/// `[C, N * HW] -> [N, C, HW]`.
fn to_batch_major(x: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .copy_from_slice(&x[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw]);
        }
    }
    out
}

/// Unfold a batch into the `[C * k * k, N * H * W]` patch matrix of a
/// stride-1 "same" convolution. Rows are ordered `(c, kh, kw)`.
fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let cols = n * hw;
    if k == 1 {
        return to_channel_major(x, n, c, hw);
    }
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; c * k * k * cols];
    for ch in 0..c {
        for kh in 0..k {
            let dh = kh as isize - pad;
            let (y0, y1) = valid_range(h, dh);
            for kw in 0..k {
                let dw = kw as isize - pad;
                let (x0, x1) = valid_range(w, dw);
                let row = &mut out[((ch * k + kh) * k + kw) * cols..((ch * k + kh) * k + kw + 1) * cols];
                for b in 0..n {
                    let xp = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for y in y0..y1 {
                        let src = (y as isize + dh) as usize * w;
                        let dst = b * hw + y * w;
                        row[dst + x0..dst + x1].copy_from_slice(
                            &xp[(src as isize + x0 as isize + dw) as usize..(src as isize + x1 as isize + dw) as usize],
                        );
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: fold a patch-matrix gradient back to `[N, C, HW]`.
fn col2im(col: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let hw = h * w;
    let cols = n * hw;
    if k == 1 {
        return to_batch_major(col, n, c, hw);
    }
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * c * hw];
    for ch in 0..c {
        for kh in 0..k {
            let dh = kh as isize - pad;
            let (y0, y1) = valid_range(h, dh);
            for kw in 0..k {
                let dw = kw as isize - pad;
                let (x0, x1) = valid_range(w, dw);
                let row = &col[((ch * k + kh) * k + kw) * cols..((ch * k + kh) * k + kw + 1) * cols];
                for b in 0..n {
                    let xp = &mut out[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                    for y in y0..y1 {
                        let src = (y as isize + dh) as usize * w;
                        let dst = b * hw + y * w;
                        let target = &mut xp
                            [(src as isize + x0 as isize + dw) as usize..(src as isize + x1 as isize + dw) as usize];
                        for (t, v) in target.iter_mut().zip(&row[dst + x0..dst + x1]) {
                            *t += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 "same" convolution as `weight[cout, cin*k*k] x im2col(x)`.
/// Each output element accumulates over patch rows in a fixed order, so
/// a sample's result does not depend on the rest of the batch.
#[allow(clippy::too_many_arguments)]
fn conv2d(
    x: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
) -> Vec<f64> {
    let hw = h * w;
    let cols = n * hw;
    let rows = cin * k * k;
    let col = im2col(x, n, cin, h, w, k);
    let mut out = vec![0.0; cout * cols];
    for co in 0..cout {
        let o = &mut out[co * cols..(co + 1) * cols];
        o.fill(bias[co]);
        for r in 0..rows {
            axpy(weight[co * rows + r], &col[r * cols..(r + 1) * cols], o);
        }
    }
    to_batch_major(&out, n, cout, hw)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    x: &[f64],
    g: &[f64],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    k: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let hw = h * w;
    let cols = n * hw;
    let rows = cin * k * k;
    let col = im2col(x, n, cin, h, w, k);
    let gt = to_channel_major(g, n, cout, hw);
    let mut gcol = vec![0.0; rows * cols];
    for co in 0..cout {
        let go = &gt[co * cols..(co + 1) * cols];
        gb[co] += go.iter().sum::<f64>();
        for r in 0..rows {
            gw[co * rows + r] += dot(go, &col[r * cols..(r + 1) * cols]);
            axpy(weight[co * rows + r], go, &mut gcol[r * cols..(r + 1) * cols]);
        }
    }
    col2im(&gcol, n, cin, h, w, k)
}

#[allow(clippy::too_many_arguments)]
fn depthwise(x: &[f64], n: usize, c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], k: usize) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let xp = &x[off..off + hw];
            let plane = &mut out[off..off + hw];
            plane.fill(bias[ch]);
            for kh in 0..k {
                let dh = kh as isize - pad;
                let (y0, y1) = valid_range(h, dh);
                for kw in 0..k {
                    let dw = kw as isize - pad;
                    let (x0, x1) = valid_range(w, dw);
                    let wv = weight[(ch * k + kh) * k + kw];
                    for y in y0..y1 {
                        let src = ((y as isize + dh) as usize * w) as isize;
                        axpy(
                            wv,
                            &xp[(src + x0 as isize + dw) as usize..(src + x1 as isize + dw) as usize],
                            &mut plane[y * w + x0..y * w + x1],
                        );
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn depthwise_backward(
    x: &[f64],
    g: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    k: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let hw = h * w;
    let pad = (k / 2) as isize;
    let mut gin = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            let xp = &x[off..off + hw];
            let gp = &g[off..off + hw];
            let gip = &mut gin[off..off + hw];
            gb[ch] += gp.iter().sum::<f64>();
            for kh in 0..k {
                let dh = kh as isize - pad;
                let (y0, y1) = valid_range(h, dh);
                for kw in 0..k {
                    let dw = kw as isize - pad;
                    let (x0, x1) = valid_range(w, dw);
                    let widx = (ch * k + kh) * k + kw;
                    let wv = weight[widx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = ((y as isize + dh) as usize * w) as isize;
                        let go = &gp[y * w + x0..y * w + x1];
                        let range = (src + x0 as isize + dw) as usize..(src + x1 as isize + dw) as usize;
                        acc += dot(go, &xp[range.clone()]);
                        axpy(wv, go, &mut gip[range]);
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    gin
}

/// Visits every (output index, input index, 1 / window count) triple.
#[allow(clippy::too_many_arguments)]
fn avgpool_visit(
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    mut f: impl FnMut(usize, usize, f64),
) {
    let pad = if stride == 1 { window / 2 } else { 0 } as isize;
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = (oy * stride) as isize - pad;
            let xs = (ox * stride) as isize - pad;
            let y0 = ys.max(0) as usize;
            let y1 = ((ys + window as isize) as usize).min(h);
            let x0 = xs.max(0) as usize;
            let x1 = ((xs + window as isize) as usize).min(w);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    f(oy * ow + ox, y * w + x, inv);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn avgpool_forward(
    x: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (hw, ohw) = (h * w, oh * ow);
    let mut out = vec![0.0; n * c * ohw];
    for (xp, op) in x.chunks(hw).zip(out.chunks_mut(ohw)) {
        avgpool_visit(h, w, window, stride, oh, ow, |o, i, inv| op[o] += xp[i] * inv);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn avgpool_backward(
    g: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let (hw, ohw) = (h * w, oh * ow);
    let mut gin = vec![0.0; n * c * hw];
    for (gp, gip) in g.chunks(ohw).zip(gin.chunks_mut(hw)) {
        avgpool_visit(h, w, window, stride, oh, ow, |o, i, inv| gip[i] += gp[o] * inv);
    }
    gin
}
