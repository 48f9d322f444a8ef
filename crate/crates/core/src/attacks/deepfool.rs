//! Deepfool: iteratively steps to the nearest linearized decision boundary,
//! accumulating the minimal-l2 perturbation, then overshoots slightly so the
//! prediction actually flips.

use super::{estimate_gradient_of, AdvExample, AttackSpec, AttackStatus, GradientSource};
use crate::error::{Error, Result};
use crate::model::{backward, forward, forward_with_cache, ModelSpec, Parameters};
use crate::tensor::{argmax, Tensor};

/// Input gradient of `logit[j] - logit[k]`.
fn logit_diff_grad(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    j: usize,
    k: usize,
    source: GradientSource,
) -> Result<(Tensor, usize)> {
    match source {
        GradientSource::Analytic => {
            let pass = forward_with_cache(spec, params, x)?;
            let mut grad_logits = Tensor::zeros(pass.logits.shape());
            grad_logits.data_mut()[j] = 1.0;
            grad_logits.data_mut()[k] = -1.0;
            let (_, grad_input) = backward(spec, params, &pass.caches, &grad_logits)?;
            Ok((grad_input, 1))
        }
        GradientSource::Estimated { delta } => estimate_gradient_of(
            |probe| {
                let logits = forward(spec, params, probe)?;
                Ok(logits.data()[j] - logits.data()[k])
            },
            x,
            delta,
        ),
    }
}

/// Minimal-l2 boundary-seeking attack; `attack.steps` caps the iterations
/// and `attack.overshoot` scales the final perturbation.
pub fn deepfool(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    attack: &AttackSpec,
) -> Result<AdvExample> {
    let classes = spec.num_classes();
    if classes < 2 {
        return Err(Error::InvalidParameter {
            name: "model",
            detail: "deepfool needs at least two classes".into(),
        });
    }
    let mut queries = 1usize;
    let logits0 = forward(spec, params, x)?;
    let original_class = argmax(&logits0);
    if original_class != y {
        // already misclassified: zero perturbation
        return AdvExample::measure(spec, params, x.clone(), x.clone(), y, queries, AttackStatus::Ok);
    }

    let mut total = Tensor::zeros(x.shape());
    let mut status = AttackStatus::NotConverged;
    for _ in 0..attack.steps.max(1) {
        let current = overshoot_point(x, &total, attack.overshoot);
        let logits = forward(spec, params, &current)?;
        queries += 1;
        if argmax(&logits) != original_class {
            status = AttackStatus::Ok;
            break;
        }
        // nearest linearized boundary over the other classes
        let mut best: Option<(f32, Tensor, f32)> = None; // (|f|/||w||, w, f)
        for j in 0..classes {
            if j == original_class {
                continue;
            }
            let (w, q) = logit_diff_grad(spec, params, &current, j, original_class, attack.gradient_source)?;
            queries += q;
            let f_j = logits.data()[j] - logits.data()[original_class];
            let norm = norm2(&w);
            if norm == 0.0 {
                continue;
            }
            let dist = f_j.abs() / norm;
            if best.as_ref().map_or(true, |(d, _, _)| dist < *d) {
                best = Some((dist, w, f_j));
            }
        }
        let Some((_, w, f_j)) = best else {
            break; // all gradients vanished
        };
        let norm = norm2(&w);
        let scale = (f_j.abs() + 1e-8) / (norm * norm);
        total.add_scaled(&w, scale)?;
    }

    let adv = overshoot_point(x, &total, attack.overshoot);
    // a final check may still flip with the applied overshoot
    let final_logits = forward(spec, params, &adv)?;
    queries += 1;
    if status == AttackStatus::NotConverged && argmax(&final_logits) != original_class {
        status = AttackStatus::Ok;
    }
    AdvExample::measure(spec, params, x.clone(), adv, y, queries, status)
}

fn overshoot_point(x: &Tensor, total: &Tensor, overshoot: f32) -> Tensor {
    let mut out = x.clone();
    out.add_scaled(total, 1.0 + overshoot).expect("shapes match");
    out.clamp_in_place(0.0, 1.0);
    out
}

fn norm2(t: &Tensor) -> f32 {
    (t.data().iter().map(|&v| v as f64 * v as f64).sum::<f64>()).sqrt() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerParams, LayerSpec};

    /// Linear 2-class model with a known boundary: logits = W x + b with
    /// rows w0 = (1, 0), w1 = (0, 1); boundary x0 = x1.
    fn linear_model() -> (ModelSpec, Parameters) {
        let spec = ModelSpec {
            input_shape: [1, 1, 2],
            layers: vec![LayerSpec::Fc { inputs: 2, outputs: 2 }],
        };
        let mut params = Parameters::init(&spec, 0).unwrap();
        params.layers[0] = Some(LayerParams {
            weights: Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]),
        });
        (spec, params)
    }

    #[test]
    fn single_step_reaches_analytic_boundary_distance() {
        let (spec, params) = linear_model();
        // prediction 0 at (0.7, 0.3); boundary distance = |f1-f0|/||w1-w0||
        // = 0.4 / sqrt(2) ~= 0.28284
        let x = Tensor::from_vec(vec![1, 1, 2], vec![0.7, 0.3]).unwrap();
        let attack = AttackSpec { overshoot: 0.0, ..AttackSpec::deepfool(1) };
        let adv = deepfool(&spec, &params, &x, 0, &attack).unwrap();
        let expected = 0.4 / (2.0f32).sqrt();
        assert!(
            (adv.l2 - expected).abs() < 1e-4,
            "l2 {} vs analytic {expected}",
            adv.l2
        );
    }

    #[test]
    fn zero_overshoot_lands_on_the_boundary() {
        let (spec, params) = linear_model();
        let x = Tensor::from_vec(vec![1, 1, 2], vec![0.7, 0.3]).unwrap();
        let attack = AttackSpec { overshoot: 0.0, ..AttackSpec::deepfool(1) };
        let adv = deepfool(&spec, &params, &x, 0, &attack).unwrap();
        let logits = forward(&spec, &params, &adv.perturbed).unwrap();
        let gap = (logits.data()[0] - logits.data()[1]).abs();
        assert!(gap < 1e-4, "logit gap at boundary = {gap}");
    }

    #[test]
    fn already_misclassified_needs_no_perturbation() {
        let (spec, params) = linear_model();
        let x = Tensor::from_vec(vec![1, 1, 2], vec![0.7, 0.3]).unwrap();
        // model predicts 0; label says 1, so it is already wrong
        let adv = deepfool(&spec, &params, &x, 1, &AttackSpec::deepfool(10)).unwrap();
        assert!(adv.success);
        assert_eq!(adv.l2, 0.0);
    }

    #[test]
    fn overshoot_flips_the_prediction() {
        let (spec, params) = linear_model();
        let x = Tensor::from_vec(vec![1, 1, 2], vec![0.7, 0.3]).unwrap();
        let attack = AttackSpec { overshoot: 0.02, ..AttackSpec::deepfool(5) };
        let adv = deepfool(&spec, &params, &x, 0, &attack).unwrap();
        assert!(adv.success);
        assert_eq!(adv.predicted_label, 1);
    }
}
