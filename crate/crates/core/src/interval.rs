//! Box-domain abstract interpretation: elementwise (lower, upper) interval
//! tensors propagated through every layer type.
//!
//! The affine transform splits weights by sign so that bounds stay sound for
//! negative coefficients. Internally that is computed in center/radius form,
//!
//! ```text
//! center' = K(W, center) + b        radius' = K(|W|, radius)
//! lower'  = center' - radius'       upper'  = center' + radius'
//! ```
//!
//! which is the same transform (`W+ l + W- u = K(W, (l+u)/2) - K(|W|, (u-l)/2)`)
//! expressed so both directions reuse the concrete kernels: fine-tuning
//! differentiates certification losses through the bound propagation itself.

use crate::error::{Error, Result};
use crate::model::{LayerCache, LayerParams, LayerSpec, ModelSpec, Parameters};
use crate::tensor::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxpool2x2,
    maxpool2x2_backward, relu, relu_backward, Tensor,
};
use serde::{Deserialize, Serialize};

/// Paired elementwise lower/upper bound tensors of identical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalTensor {
    lower: Tensor,
    upper: Tensor,
}

impl IntervalTensor {
    /// Build an interval, validating `lower <= upper` elementwise.
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        if lower.shape() != upper.shape() {
            return Err(Error::DimensionMismatch {
                op: "interval",
                axis: "shape",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (&l, &u)) in lower.data().iter().zip(upper.data().iter()).enumerate() {
            if l > u {
                return Err(Error::InvalidInterval { index: i, lower: l, upper: u });
            }
        }
        Ok(IntervalTensor { lower, upper })
    }

    /// Degenerate interval around a single point.
    pub fn point(x: &Tensor) -> Self {
        IntervalTensor { lower: x.clone(), upper: x.clone() }
    }

    /// `[x - eps, x + eps]` clipped to `[lo, hi]` per coordinate.
    pub fn linf_ball_clipped(x: &Tensor, eps: f32, lo: f32, hi: f32) -> Self {
        IntervalTensor {
            lower: x.map(|v| (v - eps).clamp(lo, hi)),
            upper: x.map(|v| (v + eps).clamp(lo, hi)),
        }
    }

    /// Widen both faces by `eps` and clip to `[lo, hi]`.
    pub fn widened_clipped(&self, eps: f32, lo: f32, hi: f32) -> Self {
        IntervalTensor {
            lower: self.lower.map(|v| (v - eps).clamp(lo, hi)),
            upper: self.upper.map(|v| (v + eps).clamp(lo, hi)),
        }
    }

    pub fn lower(&self) -> &Tensor {
        &self.lower
    }

    pub fn upper(&self) -> &Tensor {
        &self.upper
    }

    pub fn shape(&self) -> &[usize] {
        self.lower.shape()
    }

    /// True when `x` lies inside the box, allowing `tol` of slack per
    /// coordinate.
    pub fn contains(&self, x: &Tensor, tol: f32) -> bool {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data().iter())
            .zip(x.data().iter())
            .all(|((&l, &u), &v)| v >= l - tol && v <= u + tol)
    }

    /// True when every coordinate of `self` lies within `other` (+tol).
    pub fn contained_in(&self, other: &IntervalTensor, tol: f32) -> bool {
        self.lower
            .data()
            .iter()
            .zip(other.lower.data().iter())
            .all(|(&a, &b)| a >= b - tol)
            && self
                .upper
                .data()
                .iter()
                .zip(other.upper.data().iter())
                .all(|(&a, &b)| a <= b + tol)
    }
}

/// `max` of lowers, `min` of uppers; errors with the first offending index
/// when the result would be empty.
pub fn interval_intersect(a: &IntervalTensor, b: &IntervalTensor) -> Result<IntervalTensor> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch {
            op: "interval_intersect",
            axis: "shape",
            expected: a.lower.len(),
            got: b.lower.len(),
        });
    }
    let lower = a.lower.zip_map(&b.lower, f32::max)?;
    let upper = a.upper.zip_map(&b.upper, f32::min)?;
    for (i, (&l, &u)) in lower.data().iter().zip(upper.data().iter()).enumerate() {
        if l > u {
            return Err(Error::EmptyInterval { index: i, lower: l, upper: u });
        }
    }
    Ok(IntervalTensor { lower, upper })
}

/// Which affine kernel an interval transform runs through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffineKind {
    Conv { stride: usize, padding: usize },
    Fc,
}

/// Sound interval affine transform: with `W+ = max(W, 0)` and `W- = min(W, 0)`,
/// `lower' = W+ * lower + W- * upper + b` and `upper' = W+ * upper + W- * lower + b`.
pub fn interval_affine(
    input: &IntervalTensor,
    weights: &Tensor,
    bias: &Tensor,
    kind: AffineKind,
) -> Result<IntervalTensor> {
    let abs = weights.map(f32::abs);
    let zero_bias = Tensor::zeros(bias.shape());
    let (out, _) = interval_affine_with_cache(input, weights, &abs, bias, &zero_bias, kind)?;
    Ok(out)
}

/// Caches for differentiating one interval layer.
#[derive(Debug, Clone)]
pub enum IntervalCache {
    Conv { center: crate::tensor::Conv2dCache, radius: crate::tensor::Conv2dCache },
    Fc { center: crate::tensor::FcCache, radius: crate::tensor::FcCache },
    Relu { lower: crate::tensor::ReluCache, upper: crate::tensor::ReluCache },
    Pool { lower: crate::tensor::PoolCache, upper: crate::tensor::PoolCache },
}

fn interval_affine_with_cache(
    input: &IntervalTensor,
    weights: &Tensor,
    abs_weights: &Tensor,
    bias: &Tensor,
    zero_bias: &Tensor,
    kind: AffineKind,
) -> Result<(IntervalTensor, IntervalCache)> {
    let center = input.lower.zip_map(&input.upper, |l, u| 0.5 * (l + u))?;
    let radius = input.lower.zip_map(&input.upper, |l, u| 0.5 * (u - l))?;
    let (mu, rho, cache) = match kind {
        AffineKind::Conv { stride, padding } => {
            let (mu, c1) = conv2d(&center, weights, bias, stride, padding)?;
            let (rho, c2) = conv2d(&radius, abs_weights, zero_bias, stride, padding)?;
            (mu, rho, IntervalCache::Conv { center: c1, radius: c2 })
        }
        AffineKind::Fc => {
            let (mu, c1) = fully_connected(&center, weights, bias)?;
            let (rho, c2) = fully_connected(&radius, abs_weights, zero_bias)?;
            (mu, rho, IntervalCache::Fc { center: c1, radius: c2 })
        }
    };
    let lower = mu.zip_map(&rho, |m, r| m - r)?;
    let upper = mu.zip_map(&rho, |m, r| m + r)?;
    Ok((IntervalTensor { lower, upper }, cache))
}

/// `max(0, .)` on both faces.
pub fn interval_relu(input: &IntervalTensor) -> IntervalTensor {
    let (lower, _) = relu(&input.lower);
    let (upper, _) = relu(&input.upper);
    IntervalTensor { lower, upper }
}

/// Windowwise max on both faces; sound because max is monotone.
pub fn interval_maxpool(input: &IntervalTensor) -> Result<IntervalTensor> {
    let (lower, _) = maxpool2x2(&input.lower)?;
    let (upper, _) = maxpool2x2(&input.upper)?;
    Ok(IntervalTensor { lower, upper })
}

/// Whether a bound set came from the natural input box or a widened
/// adversarial one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BoundTag {
    Natural,
    Adversarial { epsilon: f32 },
}

/// Post-activation interval of every layer, in network order.
#[derive(Debug, Clone)]
pub struct BoundSet {
    pub layers: Vec<IntervalTensor>,
    pub tag: BoundTag,
}

impl BoundSet {
    pub fn output(&self) -> &IntervalTensor {
        self.layers.last().expect("bound set is never empty")
    }
}

/// Propagate an input box through the whole network.
pub fn propagate_bounds(
    spec: &ModelSpec,
    params: &Parameters,
    input_box: &IntervalTensor,
    tag: BoundTag,
) -> Result<BoundSet> {
    let abs = params.abs_weights();
    propagate_bounds_prepared(spec, params, &abs, input_box, tag).map(|(b, _)| b)
}

/// As [`propagate_bounds`], with precomputed `|W|` parameters and the caches
/// needed to differentiate through the propagation. Training loops call this
/// once per sample, sharing `abs_params` across the batch.
pub fn propagate_bounds_prepared(
    spec: &ModelSpec,
    params: &Parameters,
    abs_params: &Parameters,
    input_box: &IntervalTensor,
    tag: BoundTag,
) -> Result<(BoundSet, Vec<IntervalCache>)> {
    if input_box.shape() != spec.input_shape {
        return Err(Error::DimensionMismatch {
            op: "propagate_bounds",
            axis: "input shape",
            expected: spec.input_shape.iter().product(),
            got: input_box.lower.len(),
        });
    }
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut caches = Vec::with_capacity(spec.layers.len());
    let mut cur = input_box.clone();
    for (idx, layer) in spec.layers.iter().enumerate() {
        let (next, cache) = match layer {
            LayerSpec::Conv { stride, padding, .. } => {
                let p = params.layers[idx].as_ref().expect("conv params");
                let a = abs_params.layers[idx].as_ref().expect("conv abs params");
                interval_affine_with_cache(
                    &cur,
                    &p.weights,
                    &a.weights,
                    &p.bias,
                    &a.bias,
                    AffineKind::Conv { stride: *stride, padding: *padding },
                )?
            }
            LayerSpec::Fc { .. } => {
                let p = params.layers[idx].as_ref().expect("fc params");
                let a = abs_params.layers[idx].as_ref().expect("fc abs params");
                interval_affine_with_cache(&cur, &p.weights, &a.weights, &p.bias, &a.bias, AffineKind::Fc)?
            }
            LayerSpec::Relu => {
                let (lo, cl) = relu(&cur.lower);
                let (up, cu) = relu(&cur.upper);
                (IntervalTensor { lower: lo, upper: up }, IntervalCache::Relu { lower: cl, upper: cu })
            }
            LayerSpec::MaxPool2x2 => {
                let (lo, cl) = maxpool2x2(&cur.lower)?;
                let (up, cu) = maxpool2x2(&cur.upper)?;
                (IntervalTensor { lower: lo, upper: up }, IntervalCache::Pool { lower: cl, upper: cu })
            }
        };
        layers.push(next.clone());
        caches.push(cache);
        cur = next;
    }
    Ok((BoundSet { layers, tag }, caches))
}

/// Gradient of a scalar loss through the bound propagation.
///
/// `bound_grads[l]`, when present, holds (dL/dlower_l, dL/dupper_l) at layer
/// `l`'s output bounds. Returns parameter gradients (summed over every
/// contribution) and discards the gradient w.r.t. the input box.
pub fn backward_bounds(
    spec: &ModelSpec,
    params: &Parameters,
    abs_params: &Parameters,
    caches: &[IntervalCache],
    shapes: &[Vec<usize>],
    bound_grads: &[Option<(Tensor, Tensor)>],
) -> Result<Parameters> {
    let n = spec.layers.len();
    if caches.len() != n || bound_grads.len() != n {
        return Err(Error::DimensionMismatch {
            op: "backward_bounds",
            axis: "layers",
            expected: n,
            got: caches.len().min(bound_grads.len()),
        });
    }
    let mut grads = Parameters::zeros_like(params);
    let last_shape = &shapes[n - 1];
    let mut gl = Tensor::zeros(last_shape);
    let mut gu = Tensor::zeros(last_shape);
    if let Some((dl, du)) = &bound_grads[n - 1] {
        gl.add_scaled(dl, 1.0)?;
        gu.add_scaled(du, 1.0)?;
    }
    for idx in (0..n).rev() {
        let (next_gl, next_gu) = match (&spec.layers[idx], &caches[idx]) {
            (LayerSpec::Conv { .. }, IntervalCache::Conv { center, radius }) => {
                let p = params.layers[idx].as_ref().expect("conv params");
                let a = abs_params.layers[idx].as_ref().expect("conv abs params");
                let d_center = gl.zip_map(&gu, |l, u| l + u)?;
                let d_radius = gl.zip_map(&gu, |l, u| u - l)?;
                let (gc, gw_c, gb) = conv2d_backward(center, &p.weights, &d_center)?;
                let (gr, gw_a, _) = conv2d_backward(radius, &a.weights, &d_radius)?;
                accumulate_affine_grads(&mut grads.layers[idx], &p.weights, gw_c, gw_a, gb)?;
                split_center_radius_grad(&gc, &gr)?
            }
            (LayerSpec::Fc { .. }, IntervalCache::Fc { center, radius }) => {
                let p = params.layers[idx].as_ref().expect("fc params");
                let a = abs_params.layers[idx].as_ref().expect("fc abs params");
                let d_center = gl.zip_map(&gu, |l, u| l + u)?;
                let d_radius = gl.zip_map(&gu, |l, u| u - l)?;
                let (gc, gw_c, gb) = fully_connected_backward(center, &p.weights, &d_center)?;
                let (gr, gw_a, _) = fully_connected_backward(radius, &a.weights, &d_radius)?;
                accumulate_affine_grads(&mut grads.layers[idx], &p.weights, gw_c, gw_a, gb)?;
                split_center_radius_grad(&gc, &gr)?
            }
            (LayerSpec::Relu, IntervalCache::Relu { lower, upper }) => {
                (relu_backward(lower, &gl)?, relu_backward(upper, &gu)?)
            }
            (LayerSpec::MaxPool2x2, IntervalCache::Pool { lower, upper }) => {
                (maxpool2x2_backward(lower, &gl)?, maxpool2x2_backward(upper, &gu)?)
            }
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "layer {idx}: interval cache kind does not match layer kind"
                )))
            }
        };
        gl = next_gl;
        gu = next_gu;
        if idx > 0 {
            if let Some((dl, du)) = &bound_grads[idx - 1] {
                gl.add_scaled(dl, 1.0)?;
                gu.add_scaled(du, 1.0)?;
            }
        }
    }
    Ok(grads)
}

/// Fold the two kernel-level weight gradients into one: the radius path runs
/// through `|W|`, so its contribution is modulated by `sign(W)`.
fn accumulate_affine_grads(
    slot: &mut Option<LayerParams>,
    weights: &Tensor,
    grad_w_center: Tensor,
    grad_w_abs: Tensor,
    grad_bias: Tensor,
) -> Result<()> {
    let mut gw = grad_w_center;
    for ((g, &ga), &w) in gw
        .data_mut()
        .iter_mut()
        .zip(grad_w_abs.data().iter())
        .zip(weights.data().iter())
    {
        *g += ga * sign(w);
    }
    *slot = Some(LayerParams { weights: gw, bias: grad_bias });
    Ok(())
}

fn sign(w: f32) -> f32 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Map (d center, d radius) at a layer input back to (d lower, d upper):
/// `center = (l+u)/2`, `radius = (u-l)/2`.
fn split_center_radius_grad(gc: &Tensor, gr: &Tensor) -> Result<(Tensor, Tensor)> {
    let gl = gc.zip_map(gr, |c, r| 0.5 * (c - r))?;
    let gu = gc.zip_map(gr, |c, r| 0.5 * (c + r))?;
    Ok((gl, gu))
}

/// Point evaluation of the network recorded as degenerate bounds, aligned
/// index-for-index with [`propagate_bounds`]. Used where an algorithm wants
/// natural "bounds" that are really the activations of a single sample.
pub fn point_bounds(activations: &[Tensor]) -> BoundSet {
    BoundSet {
        layers: activations.iter().map(IntervalTensor::point).collect(),
        tag: BoundTag::Natural,
    }
}

/// Concrete forward shapes let the backward pass start from the right zero
/// gradient; exposed so callers can reuse `ModelSpec::output_shapes`.
pub fn layer_shapes(spec: &ModelSpec) -> Result<Vec<Vec<usize>>> {
    spec.output_shapes()
}

/// Check that a forward-pass activation list is shape-aligned with a bound
/// set (used by debug assertions and tests).
pub fn aligned(activations: &[Tensor], bounds: &BoundSet) -> bool {
    activations.len() == bounds.layers.len()
        && activations
            .iter()
            .zip(bounds.layers.iter())
            .all(|(a, b)| a.shape() == b.shape())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::seeded_rng;
    use crate::tensor::Tensor;

    fn itv(lo: Vec<f32>, hi: Vec<f32>) -> IntervalTensor {
        let n = lo.len();
        IntervalTensor::new(
            Tensor::from_vec(vec![n], lo).unwrap(),
            Tensor::from_vec(vec![n], hi).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn new_rejects_crossed_bounds() {
        let lo = Tensor::from_vec(vec![2], vec![0.0, 2.0]).unwrap();
        let hi = Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            IntervalTensor::new(lo, hi),
            Err(Error::InvalidInterval { index: 1, .. })
        ));
    }

    #[test]
    fn relu_on_boxes() {
        let out = interval_relu(&itv(vec![-1.0], vec![2.0]));
        assert_eq!(out.lower().data(), &[0.0]);
        assert_eq!(out.upper().data(), &[2.0]);

        let out = interval_relu(&itv(vec![-3.0], vec![-1.0]));
        assert_eq!(out.lower().data(), &[0.0]);
        assert_eq!(out.upper().data(), &[0.0]);

        let out = interval_relu(&itv(vec![1.0], vec![2.0]));
        assert_eq!(out.lower().data(), &[1.0]);
        assert_eq!(out.upper().data(), &[2.0]);
    }

    #[test]
    fn intersect_tightens() {
        let out = interval_intersect(&itv(vec![0.0], vec![3.0]), &itv(vec![1.0], vec![5.0])).unwrap();
        assert_eq!(out.lower().data(), &[1.0]);
        assert_eq!(out.upper().data(), &[3.0]);
    }

    #[test]
    fn intersect_is_idempotent() {
        let a = itv(vec![0.5, -1.0], vec![2.0, 0.0]);
        let out = interval_intersect(&a, &a).unwrap();
        assert_eq!(&out, &a);
    }

    #[test]
    fn intersect_rejects_disjoint() {
        let err =
            interval_intersect(&itv(vec![0.0], vec![1.0]), &itv(vec![2.0], vec![3.0])).unwrap_err();
        assert!(matches!(err, Error::EmptyInterval { index: 0, .. }));
    }

    #[test]
    fn affine_corner_case_two_channels() {
        // 1x1 "conv" with two input channels, weights [2, -1], bias 0,
        // both inputs in [0, 1]: corners give min -1, max 2.
        let input = IntervalTensor::new(Tensor::zeros(&[2, 1, 1]), Tensor::filled(&[2, 1, 1], 1.0))
            .unwrap();
        let weights = Tensor::from_vec(vec![1, 2, 1, 1], vec![2.0, -1.0]).unwrap();
        let bias = Tensor::zeros(&[1]);
        let out = interval_affine(&input, &weights, &bias, AffineKind::Conv { stride: 1, padding: 0 })
            .unwrap();
        assert!((out.lower().data()[0] + 1.0).abs() < 1e-6);
        assert!((out.upper().data()[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn affine_nonnegative_weights_use_matching_faces() {
        let mut rng = seeded_rng(5, 0);
        let lo = Tensor::rand_uniform(&[3], 0.0, 0.5, &mut rng);
        let hi = lo.map(|v| v + 0.25);
        let input = IntervalTensor::new(lo.clone(), hi.clone()).unwrap();
        let weights = Tensor::rand_uniform(&[2, 3], 0.0, 1.0, &mut rng);
        let bias = Tensor::rand_uniform(&[2], -0.5, 0.5, &mut rng);
        let out = interval_affine(&input, &weights, &bias, AffineKind::Fc).unwrap();
        let (exp_lo, _) = fully_connected(&lo, &weights, &bias).unwrap();
        let (exp_hi, _) = fully_connected(&hi, &weights, &bias).unwrap();
        for i in 0..2 {
            assert!((out.lower().data()[i] - exp_lo.data()[i]).abs() < 1e-5);
            assert!((out.upper().data()[i] - exp_hi.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn degenerate_box_matches_concrete_kernel() {
        let mut rng = seeded_rng(6, 0);
        let x = Tensor::rand_uniform(&[2, 4, 4], 0.0, 1.0, &mut rng);
        let weights = Tensor::rand_uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let bias = Tensor::rand_uniform(&[3], -0.5, 0.5, &mut rng);
        let out = interval_affine(
            &IntervalTensor::point(&x),
            &weights,
            &bias,
            AffineKind::Conv { stride: 1, padding: 1 },
        )
        .unwrap();
        let (exact, _) = conv2d(&x, &weights, &bias, 1, 1).unwrap();
        for i in 0..exact.len() {
            assert!((out.lower().data()[i] - exact.data()[i]).abs() < 1e-5);
            assert!((out.upper().data()[i] - exact.data()[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn maxpool_windowwise_bounds() {
        let lower = Tensor::from_vec(vec![1, 2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let upper = Tensor::from_vec(vec![1, 2, 2], vec![2.0, 1.0, 3.0, 1.0]).unwrap();
        let out = interval_maxpool(&IntervalTensor::new(lower, upper).unwrap()).unwrap();
        assert_eq!(out.lower().data(), &[1.0]);
        assert_eq!(out.upper().data(), &[3.0]);
    }

    #[test]
    fn maxpool_degenerate_box_matches_concrete() {
        let mut rng = seeded_rng(7, 0);
        let x = Tensor::rand_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let out = interval_maxpool(&IntervalTensor::point(&x)).unwrap();
        let (exact, _) = maxpool2x2(&x).unwrap();
        assert_eq!(out.lower().data(), exact.data());
        assert_eq!(out.upper().data(), exact.data());
    }

    #[test]
    fn identity_fc_preserves_unit_box() {
        let spec = ModelSpec {
            input_shape: [1, 1, 4],
            layers: vec![LayerSpec::Fc { inputs: 4, outputs: 4 }],
        };
        let mut params = Parameters::init(&spec, 0).unwrap();
        let eye: Vec<f32> = (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        params.layers[0] = Some(LayerParams {
            weights: Tensor::from_vec(vec![4, 4], eye).unwrap(),
            bias: Tensor::zeros(&[4]),
        });
        let input = IntervalTensor::new(Tensor::zeros(&[1, 1, 4]), Tensor::filled(&[1, 1, 4], 1.0))
            .unwrap();
        let bounds = propagate_bounds(&spec, &params, &input, BoundTag::Natural).unwrap();
        assert_eq!(bounds.layers.len(), 1);
        assert_eq!(bounds.output().lower().data(), &[0.0; 4]);
        assert_eq!(bounds.output().upper().data(), &[1.0; 4]);
    }
}
