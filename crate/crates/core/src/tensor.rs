//! Dense rank-N f32 tensors and the forward/backward kernels for every layer
//! type the network presets need: 2-d convolution, fully connected, ReLU,
//! 2x2 max pooling and softmax cross-entropy.
//!
//! Kernels are pure functions: they take immutable inputs, return fresh
//! outputs plus a cache holding exactly what the matching backward pass
//! needs. Reductions accumulate in f64 and store results as f32.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor of 32-bit floats with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Build a tensor from a shape and matching flat buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DataLength { expected, got: data.len() });
        }
        Ok(Tensor { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Uniform random tensor in [lo, hi), driven by the caller's RNG.
    pub fn rand_uniform<R: Rng>(shape: &[usize], lo: f32, hi: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterpret the buffer under a new shape of equal size.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::DataLength { expected, got: self.data.len() });
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combine with another tensor of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.check_same_shape(other, "zip_map")?;
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// In-place `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += scale * b;
        }
        Ok(())
    }

    /// In-place clamp of every element to [lo, hi].
    pub fn clamp_in_place(&mut self, lo: f32, hi: f32) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Euclidean distance to another tensor of the same shape.
    pub fn l2_distance(&self, other: &Tensor) -> f32 {
        let acc: f64 = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum();
        acc.sqrt() as f32
    }

    /// Max absolute coordinate difference to another tensor.
    pub fn linf_distance(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op,
                axis: "shape",
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::RankMismatch { op, expected: rank, got: self.rank() });
        }
        Ok(())
    }
}

/// Cache from [`conv2d`], consumed by [`conv2d_backward`].
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    input: Tensor,
    stride: usize,
    padding: usize,
    out_shape: [usize; 3],
}

/// Cache from [`fully_connected`], consumed by [`fully_connected_backward`].
#[derive(Debug, Clone)]
pub struct FcCache {
    input: Tensor,
}

/// Cache from [`relu`], consumed by [`relu_backward`].
#[derive(Debug, Clone)]
pub struct ReluCache {
    input: Tensor,
}

/// Cache from [`maxpool2x2`], consumed by [`maxpool2x2_backward`]: the flat
/// input index of each window's argmax, plus the input shape.
#[derive(Debug, Clone)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: [usize; 3],
    out_shape: [usize; 3],
}

fn conv_out_extent(op: &'static str, extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k || (padded - k) % stride != 0 {
        return Err(Error::BadGeometry {
            op,
            detail: format!(
                "extent {extent} with kernel {k}, stride {stride}, padding {padding} gives no integral positive output"
            ),
        });
    }
    Ok((padded - k) / stride + 1)
}

/// 2-d convolution over a single [C_in, H, W] sample.
///
/// `output[o, i, j] = bias[o] + sum_{c,u,v} weights[o,c,u,v] * padded_input[c, i*stride+u, j*stride+v]`
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Conv2dCache)> {
    input.expect_rank("conv2d", 3)?;
    weights.expect_rank("conv2d", 4)?;
    bias.expect_rank("conv2d", 1)?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, wc_in, kh, kw) = (weights.shape[0], weights.shape[1], weights.shape[2], weights.shape[3]);
    if wc_in != c_in {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            axis: "input channels",
            expected: wc_in,
            got: c_in,
        });
    }
    if kh != kw {
        return Err(Error::BadGeometry { op: "conv2d", detail: format!("kernel must be square, got {kh}x{kw}") });
    }
    if bias.shape[0] != c_out {
        return Err(Error::DimensionMismatch {
            op: "conv2d",
            axis: "bias channels",
            expected: c_out,
            got: bias.shape[0],
        });
    }
    if stride == 0 {
        return Err(Error::BadGeometry { op: "conv2d", detail: "stride must be >= 1".into() });
    }
    let h_out = conv_out_extent("conv2d", h, kh, stride, padding)?;
    let w_out = conv_out_extent("conv2d", w, kw, stride, padding)?;

    let k = kh;
    let x = input.data();
    let wd = weights.data();
    let mut out = vec![0.0f32; c_out * h_out * w_out];
    for o in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias.data[o] as f64;
                for c in 0..c_in {
                    let in_chan = c * h * w;
                    let w_chan = ((o * c_in + c) * k) * k;
                    for u in 0..k {
                        let iy = (oy * stride + u) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        // valid v range keeps ix inside [0, w)
                        let base = ox * stride;
                        let v_lo = (padding as isize - base as isize).max(0) as usize;
                        let v_hi = ((w + padding) as isize - base as isize).min(k as isize).max(0) as usize;
                        if v_lo >= v_hi {
                            continue;
                        }
                        let row = in_chan + iy as usize * w;
                        let ix0 = (base + v_lo) as isize - padding as isize;
                        let xs = &x[row + ix0 as usize..row + ix0 as usize + (v_hi - v_lo)];
                        let ws = &wd[w_chan + u * k + v_lo..w_chan + u * k + v_hi];
                        for (wv, xv) in ws.iter().zip(xs.iter()) {
                            acc += *wv as f64 * *xv as f64;
                        }
                    }
                }
                out[(o * h_out + oy) * w_out + ox] = acc as f32;
            }
        }
    }

    let output = Tensor { shape: vec![c_out, h_out, w_out], data: out };
    let cache = Conv2dCache {
        input: input.clone(),
        stride,
        padding,
        out_shape: [c_out, h_out, w_out],
    };
    Ok((output, cache))
}

/// Analytic gradients of a scalar loss through [`conv2d`]. Returns
/// `(grad_input, grad_weights, grad_bias)`.
pub fn conv2d_backward(
    cache: &Conv2dCache,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    grad_out.expect_rank("conv2d_backward", 3)?;
    if grad_out.shape() != cache.out_shape {
        return Err(Error::DimensionMismatch {
            op: "conv2d_backward",
            axis: "grad_out",
            expected: cache.out_shape.iter().product(),
            got: grad_out.len(),
        });
    }
    let input = &cache.input;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let [c_out, h_out, w_out] = cache.out_shape;
    let k = weights.shape[3];
    let (stride, padding) = (cache.stride, cache.padding);

    let x = input.data();
    let wd = weights.data();
    let g = grad_out.data();
    let mut gi = vec![0.0f64; x.len()];
    let mut gw = vec![0.0f64; wd.len()];
    let mut gb = vec![0.0f64; c_out];

    for o in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let gv = g[(o * h_out + oy) * w_out + ox] as f64;
                if gv == 0.0 {
                    continue;
                }
                gb[o] += gv;
                for c in 0..c_in {
                    let in_chan = c * h * w;
                    let w_chan = ((o * c_in + c) * k) * k;
                    for u in 0..k {
                        let iy = (oy * stride + u) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ox * stride;
                        let v_lo = (padding as isize - base as isize).max(0) as usize;
                        let v_hi = ((w + padding) as isize - base as isize).min(k as isize).max(0) as usize;
                        if v_lo >= v_hi {
                            continue;
                        }
                        let row = in_chan + iy as usize * w;
                        let ix0 = (base + v_lo - padding) as usize;
                        for v in 0..(v_hi - v_lo) {
                            let xi = row + ix0 + v;
                            let wi = w_chan + u * k + v_lo + v;
                            gw[wi] += gv * x[xi] as f64;
                            gi[xi] += gv * wd[wi] as f64;
                        }
                    }
                }
            }
        }
    }

    let grad_input = Tensor {
        shape: input.shape.clone(),
        data: gi.into_iter().map(|v| v as f32).collect(),
    };
    let grad_weights = Tensor {
        shape: weights.shape.clone(),
        data: gw.into_iter().map(|v| v as f32).collect(),
    };
    let grad_bias = Tensor { shape: vec![c_out], data: gb.into_iter().map(|v| v as f32).collect() };
    Ok((grad_input, grad_weights, grad_bias))
}

/// Fully connected layer: `output = weights . input + bias`. Rank-3 inputs
/// are accepted and treated as flattened.
pub fn fully_connected(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(Tensor, FcCache)> {
    weights.expect_rank("fully_connected", 2)?;
    bias.expect_rank("fully_connected", 1)?;
    let (m, n) = (weights.shape[0], weights.shape[1]);
    if input.len() != n {
        return Err(Error::DimensionMismatch {
            op: "fully_connected",
            axis: "input features",
            expected: n,
            got: input.len(),
        });
    }
    if bias.shape[0] != m {
        return Err(Error::DimensionMismatch {
            op: "fully_connected",
            axis: "bias features",
            expected: m,
            got: bias.shape[0],
        });
    }
    let x = input.data();
    let wd = weights.data();
    let mut out = vec![0.0f32; m];
    for (j, o) in out.iter_mut().enumerate() {
        let row = &wd[j * n..(j + 1) * n];
        let mut acc = bias.data[j] as f64;
        for (wv, xv) in row.iter().zip(x.iter()) {
            acc += *wv as f64 * *xv as f64;
        }
        *o = acc as f32;
    }
    Ok((
        Tensor { shape: vec![m], data: out },
        FcCache { input: input.clone() },
    ))
}

/// Analytic gradients through [`fully_connected`].
pub fn fully_connected_backward(
    cache: &FcCache,
    weights: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (m, n) = (weights.shape[0], weights.shape[1]);
    if grad_out.len() != m {
        return Err(Error::DimensionMismatch {
            op: "fully_connected_backward",
            axis: "grad_out features",
            expected: m,
            got: grad_out.len(),
        });
    }
    let x = cache.input.data();
    let wd = weights.data();
    let g = grad_out.data();
    let mut gi = vec![0.0f64; n];
    let mut gw = vec![0.0f32; m * n];
    for j in 0..m {
        let gv = g[j] as f64;
        let row = &wd[j * n..(j + 1) * n];
        let grow = &mut gw[j * n..(j + 1) * n];
        for i in 0..n {
            grow[i] = (gv * x[i] as f64) as f32;
            gi[i] += gv * row[i] as f64;
        }
    }
    let grad_input = Tensor {
        shape: cache.input.shape.clone(),
        data: gi.into_iter().map(|v| v as f32).collect(),
    };
    let grad_weights = Tensor { shape: weights.shape.clone(), data: gw };
    let grad_bias = Tensor { shape: vec![m], data: g.to_vec() };
    Ok((grad_input, grad_weights, grad_bias))
}

/// Elementwise `max(0, x)`.
pub fn relu(input: &Tensor) -> (Tensor, ReluCache) {
    let output = input.map(|v| v.max(0.0));
    (output, ReluCache { input: input.clone() })
}

/// Gradient through [`relu`]: passes where the forward input was > 0.
pub fn relu_backward(cache: &ReluCache, grad_out: &Tensor) -> Result<Tensor> {
    cache.input.zip_map(grad_out, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// 2x2 max pooling with stride 2; ties go to the lowest flat index.
pub fn maxpool2x2(input: &Tensor) -> Result<(Tensor, PoolCache)> {
    input.expect_rank("maxpool2x2", 3)?;
    let (c, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::BadGeometry {
            op: "maxpool2x2",
            detail: format!("spatial dims must be even, got {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; c * ho * wo];
    let mut argmax = vec![0usize; c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_idx = ch * h * w + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (du, dv) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = ch * h * w + (2 * oy + du) * w + 2 * ox + dv;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                let oi = (ch * ho + oy) * wo + ox;
                out[oi] = best;
                argmax[oi] = best_idx;
            }
        }
    }
    Ok((
        Tensor { shape: vec![c, ho, wo], data: out },
        PoolCache { argmax, in_shape: [c, h, w], out_shape: [c, ho, wo] },
    ))
}

/// Gradient through [`maxpool2x2`]: routes each output gradient to its
/// window's argmax position.
pub fn maxpool2x2_backward(cache: &PoolCache, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.shape() != cache.out_shape {
        return Err(Error::DimensionMismatch {
            op: "maxpool2x2_backward",
            axis: "grad_out",
            expected: cache.out_shape.iter().product(),
            got: grad_out.len(),
        });
    }
    let mut gi = vec![0.0f32; cache.in_shape.iter().product()];
    for (oi, &src) in cache.argmax.iter().enumerate() {
        gi[src] += grad_out.data[oi];
    }
    Ok(Tensor { shape: cache.in_shape.to_vec(), data: gi })
}

/// Numerically stable softmax cross-entropy against a class index.
///
/// Returns the scalar loss and the gradient w.r.t. the logits,
/// `softmax(logits) - onehot(label)`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f32, Tensor)> {
    let k = logits.len();
    if label >= k {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    let mut exps = vec![0.0f64; k];
    for (e, &v) in exps.iter_mut().zip(z.iter()) {
        *e = ((v - max) as f64).exp();
        sum += *e;
    }
    let loss = -((exps[label] / sum).ln()) as f32;
    let mut grad = vec![0.0f32; k];
    for (g, &e) in grad.iter_mut().zip(exps.iter()) {
        *g = (e / sum) as f32;
    }
    grad[label] -= 1.0;
    Ok((loss, Tensor { shape: logits.shape.clone(), data: grad }))
}

/// Softmax probabilities only (used by attacks needing class scores).
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.data.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor {
        shape: logits.shape.clone(),
        data: exps.into_iter().map(|e| (e / sum) as f32).collect(),
    }
}

/// Index of the largest logit (first index on ties).
pub fn argmax(t: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in t.data.iter().enumerate() {
        if v > t.data[best] {
            best = i;
        }
    }
    best
}
