//! Network assembly: layer descriptors, parameter containers, presets, and
//! the forward/backward orchestration over the kernels in [`crate::tensor`].

use crate::error::{Error, Result};
use crate::tensor::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, Conv2dCache, FcCache, PoolCache, ReluCache, Tensor,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A deterministic RNG stream derived from a base seed. Distinct streams are
/// statistically independent, so every consumer gets its own.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One layer in a feed-forward network description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2x2,
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

/// Ordered layer descriptors plus the input shape they expect.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// LeNet5 variant for 28x28 single-channel inputs: the first convolution
    /// pads by 2 so the 5x5 kernel preserves the spatial extent.
    pub fn lenet5() -> Self {
        ModelSpec {
            input_shape: [1, 28, 28],
            layers: vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 6, kernel: 5, stride: 1, padding: 2 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Conv { in_channels: 6, out_channels: 16, kernel: 5, stride: 1, padding: 0 },
                LayerSpec::Relu,
                LayerSpec::MaxPool2x2,
                LayerSpec::Fc { inputs: 400, outputs: 120 },
                LayerSpec::Relu,
                LayerSpec::Fc { inputs: 120, outputs: 84 },
                LayerSpec::Relu,
                LayerSpec::Fc { inputs: 84, outputs: 10 },
            ],
        }
    }

    /// Two-layer toy network on 6x6 inputs, small enough for brute-force
    /// oracles in tests.
    pub fn tiny() -> Self {
        ModelSpec {
            input_shape: [1, 6, 6],
            layers: vec![
                LayerSpec::Conv { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 0 },
                LayerSpec::Relu,
                LayerSpec::Fc { inputs: 32, outputs: 2 },
            ],
        }
    }

    /// Resolve a preset by name.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lenet5" => Ok(Self::lenet5()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::InvalidSpec(format!("unknown preset '{other}'"))),
        }
    }

    /// Output shape of every layer, validating consistency along the way.
    pub fn output_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape: Vec<usize> = self.input_shape.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            shape = match layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, stride, padding } => {
                    if shape.len() != 3 || shape[0] != *in_channels {
                        return Err(Error::InvalidSpec(format!(
                            "layer {idx}: conv expects [{in_channels}, H, W], got {shape:?}"
                        )));
                    }
                    let h = conv_extent(idx, shape[1], *kernel, *stride, *padding)?;
                    let w = conv_extent(idx, shape[2], *kernel, *stride, *padding)?;
                    vec![*out_channels, h, w]
                }
                LayerSpec::Relu => shape,
                LayerSpec::MaxPool2x2 => {
                    if shape.len() != 3 || shape[1] % 2 != 0 || shape[2] % 2 != 0 {
                        return Err(Error::InvalidSpec(format!(
                            "layer {idx}: maxpool needs even spatial dims, got {shape:?}"
                        )));
                    }
                    vec![shape[0], shape[1] / 2, shape[2] / 2]
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let flat: usize = shape.iter().product();
                    if flat != *inputs {
                        return Err(Error::InvalidSpec(format!(
                            "layer {idx}: fc expects {inputs} features, got {flat} (shape {shape:?})"
                        )));
                    }
                    vec![*outputs]
                }
            };
            out.push(shape.clone());
        }
        match self.layers.last() {
            Some(LayerSpec::Fc { .. }) => {}
            _ => return Err(Error::InvalidSpec("final layer must be fully connected".into())),
        }
        Ok(out)
    }

    /// Number of class logits produced by the final layer.
    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Fc { outputs, .. }) => *outputs,
            _ => 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Indices of the ReLU layers (where detection thresholds live).
    pub fn relu_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerSpec::Relu).then_some(i))
            .collect()
    }
}

fn conv_extent(idx: usize, extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if stride == 0 || padded < k || (padded - k) % stride != 0 {
        return Err(Error::InvalidSpec(format!(
            "layer {idx}: conv geometry {extent}+2*{padding} with kernel {k} stride {stride} invalid"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Weight and bias tensors for one parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Per-layer parameter tensors, aligned with the layer list of a
/// [`ModelSpec`] (`None` for layers without parameters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub layers: Vec<Option<LayerParams>>,
    pub seed: u64,
}

impl Parameters {
    /// Glorot-uniform initialization, deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.output_shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, layer) in spec.layers.iter().enumerate() {
            let mut rng = seeded_rng(seed, idx as u64);
            let params = match layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    let fan_in = in_channels * kernel * kernel;
                    let fan_out = out_channels * kernel * kernel;
                    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
                    Some(LayerParams {
                        weights: Tensor::rand_uniform(
                            &[*out_channels, *in_channels, *kernel, *kernel],
                            -limit,
                            limit,
                            &mut rng,
                        ),
                        bias: Tensor::zeros(&[*out_channels]),
                    })
                }
                LayerSpec::Fc { inputs, outputs } => {
                    let limit = (6.0 / (inputs + outputs) as f32).sqrt();
                    Some(LayerParams {
                        weights: Tensor::rand_uniform(&[*outputs, *inputs], -limit, limit, &mut rng),
                        bias: Tensor::zeros(&[*outputs]),
                    })
                }
                LayerSpec::Relu | LayerSpec::MaxPool2x2 => None,
            };
            layers.push(params);
        }
        Ok(Parameters { layers, seed })
    }

    /// Zeroed parameters with the same structure (gradient accumulators).
    pub fn zeros_like(other: &Parameters) -> Self {
        Parameters {
            layers: other
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weights: Tensor::zeros(p.weights.shape()),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
            seed: other.seed,
        }
    }

    /// Elementwise absolute weights with zeroed biases; the radius path of
    /// interval propagation runs the concrete kernels with these.
    pub fn abs_weights(&self) -> Parameters {
        Parameters {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.as_ref().map(|p| LayerParams {
                        weights: p.weights.map(f32::abs),
                        bias: Tensor::zeros(p.bias.shape()),
                    })
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// In-place `self += scale * other`, layer by layer.
    pub fn add_scaled(&mut self, other: &Parameters, scale: f32) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            if let (Some(pa), Some(pb)) = (a.as_mut(), b.as_ref()) {
                pa.weights.add_scaled(&pb.weights, scale)?;
                pa.bias.add_scaled(&pb.bias, scale)?;
            }
        }
        Ok(())
    }

    /// In-place multiply of every tensor by a scalar.
    pub fn scale(&mut self, factor: f32) {
        for layer in self.layers.iter_mut().flatten() {
            for v in layer.weights.data_mut() {
                *v *= factor;
            }
            for v in layer.bias.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.layers
            .iter()
            .flatten()
            .map(|p| p.weights.len() + p.bias.len())
            .sum()
    }
}

/// Forward-pass cache for one layer, reusable for exactly one backward call.
#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv(Conv2dCache),
    Fc(FcCache),
    Relu(ReluCache),
    Pool(PoolCache),
}

/// Everything a forward pass produces: class logits, the post-activation
/// output of every layer (index-aligned with propagated bound sets), and the
/// caches for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Tensor,
    pub activations: Vec<Tensor>,
    pub caches: Vec<LayerCache>,
}

/// Run the network over one input, keeping per-layer outputs and caches.
pub fn forward_with_cache(spec: &ModelSpec, params: &Parameters, input: &Tensor) -> Result<ForwardPass> {
    if input.shape() != spec.input_shape {
        return Err(Error::DimensionMismatch {
            op: "forward",
            axis: "input shape",
            expected: spec.input_shape.iter().product(),
            got: input.len(),
        });
    }
    let mut activations = Vec::with_capacity(spec.layers.len());
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut x = input.clone();
    for (idx, layer) in spec.layers.iter().enumerate() {
        let (out, cache) = match layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let p = params.layers[idx].as_ref().expect("conv params");
                let (out, c) = conv2d(&x, &p.weights, &p.bias, *stride, *padding)?;
                (out, LayerCache::Conv(c))
            }
            LayerSpec::Fc { .. } => {
                let p = params.layers[idx].as_ref().expect("fc params");
                let (out, c) = fully_connected(&x, &p.weights, &p.bias)?;
                (out, LayerCache::Fc(c))
            }
            LayerSpec::Relu => {
                let (out, c) = relu(&x);
                (out, LayerCache::Relu(c))
            }
            LayerSpec::MaxPool2x2 => {
                let (out, c) = maxpool2x2(&x)?;
                (out, LayerCache::Pool(c))
            }
        };
        activations.push(out.clone());
        caches.push(cache);
        x = out;
    }
    Ok(ForwardPass { logits: x, activations, caches })
}

/// Plain inference: logits only.
pub fn forward(spec: &ModelSpec, params: &Parameters, input: &Tensor) -> Result<Tensor> {
    Ok(forward_with_cache(spec, params, input)?.logits)
}

/// Gradients of a scalar loss w.r.t. every parameter and the input, given
/// `grad_logits` = dLoss/dlogits and the caches of the matching forward call.
pub fn backward(
    spec: &ModelSpec,
    params: &Parameters,
    caches: &[LayerCache],
    grad_logits: &Tensor,
) -> Result<(Parameters, Tensor)> {
    backward_with_activation_grads(spec, params, caches, grad_logits, None)
}

/// As [`backward`], but additionally injects `extra[l]` into the gradient
/// flowing out of layer `l` (dLoss/d activations[l]). Regularizers defined on
/// intermediate activations enter the chain here.
pub fn backward_with_activation_grads(
    spec: &ModelSpec,
    params: &Parameters,
    caches: &[LayerCache],
    grad_logits: &Tensor,
    extra: Option<&[Option<Tensor>]>,
) -> Result<(Parameters, Tensor)> {
    let n = spec.layers.len();
    if caches.len() != n {
        return Err(Error::DimensionMismatch {
            op: "backward",
            axis: "caches",
            expected: n,
            got: caches.len(),
        });
    }
    let mut grads = Parameters::zeros_like(params);
    let mut g = grad_logits.clone();
    if let Some(extra) = extra {
        if let Some(t) = &extra[n - 1] {
            g.add_scaled(t, 1.0)?;
        }
    }
    for idx in (0..n).rev() {
        g = match (&spec.layers[idx], &caches[idx]) {
            (LayerSpec::Conv { .. }, LayerCache::Conv(c)) => {
                let p = params.layers[idx].as_ref().expect("conv params");
                let (gi, gw, gb) = conv2d_backward(c, &p.weights, &g)?;
                grads.layers[idx] = Some(LayerParams { weights: gw, bias: gb });
                gi
            }
            (LayerSpec::Fc { .. }, LayerCache::Fc(c)) => {
                let p = params.layers[idx].as_ref().expect("fc params");
                let (gi, gw, gb) = fully_connected_backward(c, &p.weights, &g)?;
                grads.layers[idx] = Some(LayerParams { weights: gw, bias: gb });
                gi
            }
            (LayerSpec::Relu, LayerCache::Relu(c)) => relu_backward(c, &g)?,
            (LayerSpec::MaxPool2x2, LayerCache::Pool(c)) => maxpool2x2_backward(c, &g)?,
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "layer {idx}: cache kind does not match layer kind"
                )))
            }
        };
        if idx > 0 {
            if let Some(extra) = extra {
                if let Some(t) = &extra[idx - 1] {
                    g.add_scaled(t, 1.0)?;
                }
            }
        }
    }
    Ok((grads, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_cross_entropy;

    #[test]
    fn lenet5_shapes_line_up() {
        let spec = ModelSpec::lenet5();
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes[0], vec![6, 28, 28]);
        assert_eq!(shapes[2], vec![6, 14, 14]);
        assert_eq!(shapes[3], vec![16, 10, 10]);
        assert_eq!(shapes[5], vec![16, 5, 5]);
        assert_eq!(shapes[10], vec![10]);
        assert_eq!(spec.num_classes(), 10);
    }

    #[test]
    fn tiny_shapes_line_up() {
        let spec = ModelSpec::tiny();
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes, vec![vec![2, 4, 4], vec![2, 4, 4], vec![2]]);
    }

    #[test]
    fn rejects_inconsistent_fc_width() {
        let spec = ModelSpec {
            input_shape: [1, 6, 6],
            layers: vec![LayerSpec::Fc { inputs: 35, outputs: 2 }],
        };
        assert!(matches!(spec.output_shapes(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn rejects_non_fc_final_layer() {
        let spec = ModelSpec { input_shape: [1, 6, 6], layers: vec![LayerSpec::Relu] };
        assert!(matches!(spec.output_shapes(), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let spec = ModelSpec::tiny();
        let params = {
            let mut p = Parameters::init(&spec, 0).unwrap();
            p.scale(0.0);
            p
        };
        let input = Tensor::filled(&[1, 6, 6], 0.3);
        let pass = forward_with_cache(&spec, &params, &input).unwrap();
        assert!(pass.logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = softmax_cross_entropy(&pass.logits, 0).unwrap();
        assert!((loss - (2.0f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 42).unwrap();
        let input = Tensor::filled(&[1, 6, 6], 0.42);
        let a = forward(&spec, &params, &input).unwrap();
        let b = forward(&spec, &params, &input).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let spec = ModelSpec::lenet5();
        let a = Parameters::init(&spec, 7).unwrap();
        let b = Parameters::init(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = Parameters::init(&spec, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_grad_logits_give_zero_grads() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 1).unwrap();
        let input = Tensor::filled(&[1, 6, 6], 0.5);
        let pass = forward_with_cache(&spec, &params, &input).unwrap();
        let (grads, gi) = backward(&spec, &params, &pass.caches, &Tensor::zeros(&[2])).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        for layer in grads.layers.iter().flatten() {
            assert!(layer.weights.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_grad_logits() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 3).unwrap();
        let input = Tensor::filled(&[1, 6, 6], 0.5);
        let pass = forward_with_cache(&spec, &params, &input).unwrap();
        let g1 = Tensor::from_vec(vec![2], vec![0.3, -0.7]).unwrap();
        let g2 = g1.map(|v| v * 4.0);
        let (grads1, gi1) = backward(&spec, &params, &pass.caches, &g1).unwrap();
        let (grads2, gi2) = backward(&spec, &params, &pass.caches, &g2).unwrap();
        for (a, b) in gi1.data().iter().zip(gi2.data().iter()) {
            assert!((4.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
        }
        for (la, lb) in grads1.layers.iter().zip(grads2.layers.iter()) {
            if let (Some(pa), Some(pb)) = (la, lb) {
                for (a, b) in pa.weights.data().iter().zip(pb.weights.data().iter()) {
                    assert!((4.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0));
                }
            }
        }
    }
}
