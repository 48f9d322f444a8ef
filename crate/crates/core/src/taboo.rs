//! Taboo keys, detection thresholds, the detection/certification losses,
//! inference-time detection and certification-margin computation.
//!
//! A key selects a secret random subset of post-ReLU activations per layer
//! (the mask) and pairs each layer with a scalar threshold. Detection fires
//! when any masked activation strictly exceeds its layer threshold; the
//! certification losses shape where propagated bounds sit relative to those
//! thresholds.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interval::{propagate_bounds, BoundSet, BoundTag, IntervalTensor};
use crate::model::{forward_with_cache, seeded_rng, ModelSpec, Parameters};
use crate::tensor::Tensor;
use crate::train::profile_input_bounds;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default detection threshold for fine-tuned modes.
pub const DEFAULT_THRESHOLD: f32 = 1e-4;

/// The three operating modes: calibration-only thresholds, fine-tuning with
/// the loose certification loss, fine-tuning with the strict one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CttMode {
    Lite,
    Loose,
    Strict,
}

impl std::str::FromStr for CttMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lite" => Ok(CttMode::Lite),
            "loose" => Ok(CttMode::Loose),
            "strict" => Ok(CttMode::Strict),
            other => Err(Error::InvalidParameter {
                name: "mode",
                detail: format!("expected lite|loose|strict, got '{other}'"),
            }),
        }
    }
}

/// Secret per-layer neuron masks plus per-layer scalar thresholds.
///
/// `masks[l]` holds sorted flat indices into layer `l`'s output tensor; only
/// ReLU layers ever carry a non-empty mask. `thresholds[l]` is that layer's
/// detection threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabooKey {
    pub masks: Vec<Vec<usize>>,
    pub thresholds: Vec<f32>,
    pub beta: f32,
    pub seed: u64,
}

impl TabooKey {
    /// Number of instrumented neurons.
    pub fn instrumented_count(&self) -> usize {
        self.masks.iter().map(Vec::len).sum()
    }

    /// Instrumented neurons as a fraction of all maskable (post-ReLU) ones.
    pub fn instrumented_fraction(&self, spec: &ModelSpec) -> Result<f32> {
        let shapes = spec.output_shapes()?;
        let total: usize = spec
            .relu_layers()
            .iter()
            .map(|&l| shapes[l].iter().product::<usize>())
            .sum();
        Ok(self.instrumented_count() as f32 / total.max(1) as f32)
    }

    /// Check mask indices fit the model's layer shapes.
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.output_shapes()?;
        if self.masks.len() != spec.num_layers() || self.thresholds.len() != spec.num_layers() {
            return Err(Error::DimensionMismatch {
                op: "taboo_key",
                axis: "layers",
                expected: spec.num_layers(),
                got: self.masks.len(),
            });
        }
        for (l, mask) in self.masks.iter().enumerate() {
            let numel: usize = shapes[l].iter().product();
            if let Some(&bad) = mask.iter().find(|&&i| i >= numel) {
                return Err(Error::InvalidParameter {
                    name: "mask",
                    detail: format!("layer {l}: index {bad} out of range for {numel} neurons"),
                });
            }
        }
        if self.thresholds.iter().any(|&t| t < 0.0) {
            return Err(Error::InvalidParameter {
                name: "threshold",
                detail: "post-ReLU thresholds must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// Draw a key: every post-ReLU activation is selected independently with
/// probability `beta`; thresholds start at `threshold`. Deterministic in
/// `(spec, beta, seed)`.
pub fn generate_key(spec: &ModelSpec, beta: f32, threshold: f32, seed: u64) -> Result<TabooKey> {
    if !(0.0..1.0).contains(&beta) || beta <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "beta",
            detail: format!("mask density must be in (0, 1), got {beta}"),
        });
    }
    if threshold < 0.0 {
        return Err(Error::InvalidParameter {
            name: "threshold",
            detail: format!("must be nonnegative, got {threshold}"),
        });
    }
    let shapes = spec.output_shapes()?;
    let relu_layers = spec.relu_layers();
    let mut masks = vec![Vec::new(); spec.num_layers()];
    for &l in &relu_layers {
        let numel: usize = shapes[l].iter().product();
        let mut rng = seeded_rng(seed, 0x7ab0_0000 + l as u64);
        masks[l] = (0..numel).filter(|_| rng.gen::<f32>() < beta).collect();
    }
    Ok(TabooKey { masks, thresholds: vec![threshold; spec.num_layers()], beta, seed })
}

/// Values of the detection loss and the active certification loss on one
/// sample or batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CttLosses {
    pub detect: f32,
    pub certify: f32,
    pub mode: CttMode,
}

/// How the detection loss aggregates offending activations: the sum of the
/// activation values themselves, or of their hinge distances above the
/// threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DetectLossForm {
    #[default]
    ActivationSum,
    Hinge,
}

/// Detection + certification losses over one sample's activations and its
/// adversarial bound set.
///
/// `L_D` sums masked activations strictly above the layer threshold. The
/// certification loss hinges on the threshold sitting above the relevant
/// adversarial bound face: lower bounds in strict mode, upper bounds in
/// loose mode.
pub fn compute_reg_losses(
    activations: &[Tensor],
    adv_bounds: &BoundSet,
    key: &TabooKey,
    mode: CttMode,
) -> Result<CttLosses> {
    let (losses, _, _) = reg_losses_with_grads(activations, adv_bounds, key, mode, DetectLossForm::ActivationSum, false)?;
    Ok(losses)
}

/// As [`compute_reg_losses`], optionally materializing the gradients of
/// `L_D` w.r.t. activations and of `L_C` w.r.t. the adversarial bounds.
/// Gradients are unscaled; callers weight them by their annealing factors.
pub fn reg_losses_with_grads(
    activations: &[Tensor],
    adv_bounds: &BoundSet,
    key: &TabooKey,
    mode: CttMode,
    form: DetectLossForm,
    with_grads: bool,
) -> Result<(CttLosses, Vec<Option<Tensor>>, Vec<Option<(Tensor, Tensor)>>)> {
    if mode == CttMode::Lite {
        return Err(Error::InvalidParameter {
            name: "mode",
            detail: "lite mode has no regularization losses".into(),
        });
    }
    let n = activations.len();
    if adv_bounds.layers.len() != n || key.masks.len() != n {
        return Err(Error::DimensionMismatch {
            op: "reg_losses",
            axis: "layers",
            expected: n,
            got: adv_bounds.layers.len().min(key.masks.len()),
        });
    }
    let mut detect = 0.0f64;
    let mut certify = 0.0f64;
    let mut act_grads: Vec<Option<Tensor>> = vec![None; n];
    let mut bound_grads: Vec<Option<(Tensor, Tensor)>> = vec![None; n];

    for l in 0..n {
        if key.masks[l].is_empty() {
            continue;
        }
        let t = key.thresholds[l];
        let acts = activations[l].data();
        let bounds = &adv_bounds.layers[l];
        if acts.len() != bounds.lower().len() {
            return Err(Error::DimensionMismatch {
                op: "reg_losses",
                axis: "layer width",
                expected: acts.len(),
                got: bounds.lower().len(),
            });
        }
        if let Some(&bad) = key.masks[l].iter().find(|&&i| i >= acts.len()) {
            return Err(Error::InvalidParameter {
                name: "mask",
                detail: format!("layer {l}: index {bad} out of range for {} neurons", acts.len()),
            });
        }
        let mut d_act = with_grads.then(|| Tensor::zeros(activations[l].shape()));
        let mut d_bound = with_grads.then(|| {
            (Tensor::zeros(activations[l].shape()), Tensor::zeros(activations[l].shape()))
        });
        for &i in &key.masks[l] {
            let a = acts[i];
            if a > t {
                detect += match form {
                    DetectLossForm::ActivationSum => a as f64,
                    DetectLossForm::Hinge => (a - t) as f64,
                };
                if let Some(g) = d_act.as_mut() {
                    g.data_mut()[i] = 1.0;
                }
            }
            let bound_face = match mode {
                CttMode::Strict => bounds.lower().data()[i],
                CttMode::Loose => bounds.upper().data()[i],
                CttMode::Lite => unreachable!(),
            };
            if t > bound_face {
                certify += (t - bound_face) as f64;
                if let Some((gl, gu)) = d_bound.as_mut() {
                    match mode {
                        CttMode::Strict => gl.data_mut()[i] = -1.0,
                        CttMode::Loose => gu.data_mut()[i] = -1.0,
                        CttMode::Lite => unreachable!(),
                    }
                }
            }
        }
        act_grads[l] = d_act;
        bound_grads[l] = d_bound;
    }
    Ok((
        CttLosses { detect: detect as f32, certify: certify as f32, mode },
        act_grads,
        bound_grads,
    ))
}

/// Outcome of a detection pass on one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Verdict {
    Benign,
    Malicious { layer: usize, index: usize, value: f32 },
}

impl Verdict {
    pub fn is_malicious(&self) -> bool {
        matches!(self, Verdict::Malicious { .. })
    }
}

/// Verdict plus the classification logits, so callers apply their policy.
#[derive(Debug, Clone)]
pub struct Detection {
    pub verdict: Verdict,
    pub logits: Tensor,
}

/// Alarm check over an already-computed activation list. Malicious when at
/// least `min_hits` masked activations strictly exceed their layer
/// thresholds; reports the first offender.
pub fn check_activations(key: &TabooKey, activations: &[Tensor], min_hits: usize) -> Verdict {
    let mut hits = 0usize;
    let mut first: Option<(usize, usize, f32)> = None;
    for (l, mask) in key.masks.iter().enumerate() {
        if mask.is_empty() {
            continue;
        }
        let t = key.thresholds[l];
        let acts = activations[l].data();
        for &i in mask {
            let v = acts[i];
            if v > t {
                hits += 1;
                if first.is_none() {
                    first = Some((l, i, v));
                }
            }
        }
    }
    match first {
        Some((layer, index, value)) if hits >= min_hits.max(1) => {
            Verdict::Malicious { layer, index, value }
        }
        _ => Verdict::Benign,
    }
}

/// Run the network on `input` and apply the alarm policy.
pub fn detect(
    spec: &ModelSpec,
    params: &Parameters,
    key: &TabooKey,
    input: &Tensor,
    min_hits: usize,
) -> Result<Detection> {
    let pass = forward_with_cache(spec, params, input)?;
    let verdict = check_activations(key, &pass.activations, min_hits);
    Ok(Detection { verdict, logits: pass.logits })
}

/// Per-layer maxima of masked activations over a dataset.
fn masked_layer_maxima(
    spec: &ModelSpec,
    params: &Parameters,
    key: &TabooKey,
    dataset: &Dataset,
) -> Result<Vec<f32>> {
    let n_layers = spec.num_layers();
    let maxima = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let pass = forward_with_cache(spec, params, &dataset.image(i))?;
            let mut m = vec![f32::NEG_INFINITY; n_layers];
            for (l, mask) in key.masks.iter().enumerate() {
                let acts = pass.activations[l].data();
                for &idx in mask {
                    m[l] = m[l].max(acts[idx]);
                }
            }
            Ok(m)
        })
        .collect::<Result<Vec<Vec<f32>>>>()?;
    let mut out = vec![f32::NEG_INFINITY; n_layers];
    for m in maxima {
        for (o, v) in out.iter_mut().zip(m) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Calibration-only thresholds: set each instrumented layer's threshold to
/// the maximum masked activation observed anywhere in the dataset, so a
/// detection pass over that same dataset raises exactly zero alarms.
pub fn calibrate_lite(
    spec: &ModelSpec,
    params: &Parameters,
    key: &TabooKey,
    dataset: &Dataset,
) -> Result<TabooKey> {
    if dataset.is_empty() {
        return Err(Error::InvalidParameter { name: "dataset", detail: "must be non-empty".into() });
    }
    let maxima = masked_layer_maxima(spec, params, key, dataset)?;
    let mut out = key.clone();
    for (l, t) in out.thresholds.iter_mut().enumerate() {
        if !key.masks[l].is_empty() {
            *t = maxima[l].max(0.0);
        }
    }
    Ok(out)
}

/// Certification margins for one instrumented layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCertification {
    pub layer: usize,
    pub threshold: f32,
    pub neuron_indices: Vec<usize>,
    /// `T_l - B_up` against natural propagated bounds; nonnegative means no
    /// natural input inside the profiled box can raise an alarm here.
    pub loose_margins: Vec<f32>,
    /// `adv B_low - T_l`; nonnegative means every input in the widened box
    /// must raise an alarm here.
    pub strict_margins: Vec<f32>,
    /// `|B_up - T_l|`, the distance between the natural upper bound and the
    /// threshold.
    pub r_values: Vec<f32>,
    /// `T_l - max` over the dataset's actual masked activations (0 exactly
    /// after lite calibration): the empirical counterpart of `loose_margins`
    /// without interval over-approximation.
    pub dataset_margins: Vec<f32>,
}

/// Margins and verdicts for every masked neuron, at a given epsilon.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationResult {
    pub epsilon: f32,
    pub layers: Vec<LayerCertification>,
    pub loose_certified: bool,
    pub strict_certified: bool,
}

impl CertificationResult {
    pub fn min_loose_margin(&self) -> f32 {
        self.layers
            .iter()
            .flat_map(|l| l.loose_margins.iter().copied())
            .fold(f32::INFINITY, f32::min)
    }

    pub fn min_strict_margin(&self) -> f32 {
        self.layers
            .iter()
            .flat_map(|l| l.strict_margins.iter().copied())
            .fold(f32::INFINITY, f32::min)
    }
}

/// Propagate natural bounds from the profiled dataset box and adversarial
/// bounds from the epsilon-widened box (both clipped to [0, 1]), then report
/// per-masked-neuron margins against the thresholds.
pub fn certify(
    spec: &ModelSpec,
    params: &Parameters,
    key: &TabooKey,
    dataset: &Dataset,
    epsilon: f32,
) -> Result<CertificationResult> {
    if epsilon < 0.0 {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            detail: format!("must be nonnegative, got {epsilon}"),
        });
    }
    key.validate(spec)?;
    let natural_box = profile_input_bounds(dataset);
    let adv_box = natural_box.widened_clipped(epsilon, 0.0, 1.0);
    let natural = propagate_bounds(spec, params, &natural_box, BoundTag::Natural)?;
    let adversarial =
        propagate_bounds(spec, params, &adv_box, BoundTag::Adversarial { epsilon })?;
    let maxima = masked_layer_maxima(spec, params, key, dataset)?;

    let mut layers = Vec::new();
    for (l, mask) in key.masks.iter().enumerate() {
        if mask.is_empty() {
            continue;
        }
        let t = key.thresholds[l];
        let nat_up = natural.layers[l].upper().data();
        let adv_low = adversarial.layers[l].lower().data();
        let loose_margins: Vec<f32> = mask.iter().map(|&i| t - nat_up[i]).collect();
        let strict_margins: Vec<f32> = mask.iter().map(|&i| adv_low[i] - t).collect();
        let r_values: Vec<f32> = mask.iter().map(|&i| (nat_up[i] - t).abs()).collect();
        let dataset_margins: Vec<f32> = mask.iter().map(|_| t - maxima[l]).collect();
        layers.push(LayerCertification {
            layer: l,
            threshold: t,
            neuron_indices: mask.clone(),
            loose_margins,
            strict_margins,
            r_values,
            dataset_margins,
        });
    }
    let loose_certified = layers.iter().all(|l| l.loose_margins.iter().all(|&m| m >= 0.0));
    let strict_certified = layers.iter().all(|l| l.strict_margins.iter().all(|&m| m >= 0.0));
    Ok(CertificationResult { epsilon, layers, loose_certified, strict_certified })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_fixture, FixtureKind};
    use crate::interval::point_bounds;

    fn one_layer_setup(acts: Vec<f32>, mask: Vec<usize>, t: f32) -> (Vec<Tensor>, TabooKey) {
        let n = acts.len();
        let activations = vec![Tensor::from_vec(vec![n], acts).unwrap()];
        let key = TabooKey { masks: vec![mask], thresholds: vec![t], beta: 0.5, seed: 0 };
        (activations, key)
    }

    #[test]
    fn detect_loss_sums_offending_activations() {
        let (acts, key) = one_layer_setup(vec![0.5, 2.0], vec![0, 1], 1.0);
        let bounds = point_bounds(&acts);
        let losses = compute_reg_losses(&acts, &bounds, &key, CttMode::Loose).unwrap();
        assert_eq!(losses.detect, 2.0);
    }

    #[test]
    fn loose_loss_zero_when_bounds_exceed_threshold() {
        let (acts, key) = one_layer_setup(vec![0.5, 2.0], vec![0, 1], 1e-4);
        let bounds = point_bounds(&acts); // upper faces 0.5 and 2.0
        let losses = compute_reg_losses(&acts, &bounds, &key, CttMode::Loose).unwrap();
        assert_eq!(losses.certify, 0.0);
    }

    #[test]
    fn strict_loss_hinges_on_low_bounds() {
        let acts = vec![Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap()];
        let key = TabooKey { masks: vec![vec![0, 1]], thresholds: vec![1.0], beta: 0.5, seed: 0 };
        let lows = Tensor::from_vec(vec![2], vec![0.2, 3.0]).unwrap();
        let ups = Tensor::from_vec(vec![2], vec![4.0, 5.0]).unwrap();
        let bounds = BoundSet {
            layers: vec![IntervalTensor::new(lows, ups).unwrap()],
            tag: BoundTag::Adversarial { epsilon: 0.1 },
        };
        let losses = compute_reg_losses(&acts, &bounds, &key, CttMode::Strict).unwrap();
        assert!((losses.certify - 0.8).abs() < 1e-6);
    }

    #[test]
    fn loose_never_exceeds_strict() {
        let mut rng = seeded_rng(13, 0);
        for _ in 0..50 {
            let n = 8;
            let acts = vec![Tensor::rand_uniform(&[n], 0.0, 2.0, &mut rng)];
            let lo = Tensor::rand_uniform(&[n], 0.0, 1.0, &mut rng);
            let up = lo.map(|v| v + 0.5);
            let bounds = BoundSet {
                layers: vec![IntervalTensor::new(lo, up).unwrap()],
                tag: BoundTag::Adversarial { epsilon: 0.1 },
            };
            let key =
                TabooKey { masks: vec![(0..n).collect()], thresholds: vec![0.8], beta: 0.5, seed: 0 };
            let strict = compute_reg_losses(&acts, &bounds, &key, CttMode::Strict).unwrap();
            let loose = compute_reg_losses(&acts, &bounds, &key, CttMode::Loose).unwrap();
            assert!(loose.certify <= strict.certify + 1e-6);
        }
    }

    #[test]
    fn lite_mode_has_no_losses() {
        let (acts, key) = one_layer_setup(vec![0.1], vec![0], 1.0);
        let bounds = point_bounds(&acts);
        assert!(compute_reg_losses(&acts, &bounds, &key, CttMode::Lite).is_err());
    }

    #[test]
    fn verdict_thresholds_are_strict() {
        let (acts, key) = one_layer_setup(vec![0.5], vec![0], 1.0);
        assert_eq!(check_activations(&key, &acts, 1), Verdict::Benign);

        let (acts, key) = one_layer_setup(vec![1.5], vec![0], 1.0);
        assert!(check_activations(&key, &acts, 1).is_malicious());

        // exactly at the threshold stays benign
        let (acts, key) = one_layer_setup(vec![1.0], vec![0], 1.0);
        assert_eq!(check_activations(&key, &acts, 1), Verdict::Benign);
    }

    #[test]
    fn verdict_ignores_unmasked_neurons() {
        let (mut acts, key) = one_layer_setup(vec![0.5, 0.0], vec![0], 1.0);
        assert_eq!(check_activations(&key, &acts, 1), Verdict::Benign);
        acts[0].data_mut()[1] = 99.0; // unmasked neuron explodes, verdict unchanged
        assert_eq!(check_activations(&key, &acts, 1), Verdict::Benign);
    }

    #[test]
    fn min_hits_policy_counts_offenders() {
        let (acts, key) = one_layer_setup(vec![2.0, 2.0, 0.0], vec![0, 1, 2], 1.0);
        assert!(check_activations(&key, &acts, 2).is_malicious());
        assert_eq!(check_activations(&key, &acts, 3), Verdict::Benign);
    }

    #[test]
    fn key_generation_is_deterministic() {
        let spec = ModelSpec::lenet5();
        let a = generate_key(&spec, 0.05, DEFAULT_THRESHOLD, 9).unwrap();
        let b = generate_key(&spec, 0.05, DEFAULT_THRESHOLD, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_key(&spec, 0.05, DEFAULT_THRESHOLD, 10).unwrap();
        assert_ne!(a.masks, c.masks);
    }

    #[test]
    fn key_rejects_bad_beta() {
        let spec = ModelSpec::tiny();
        assert!(generate_key(&spec, 0.0, DEFAULT_THRESHOLD, 0).is_err());
        assert!(generate_key(&spec, 1.0, DEFAULT_THRESHOLD, 0).is_err());
    }

    #[test]
    fn key_masks_only_relu_layers() {
        let spec = ModelSpec::lenet5();
        let key = generate_key(&spec, 0.2, DEFAULT_THRESHOLD, 1).unwrap();
        for (l, mask) in key.masks.iter().enumerate() {
            if !mask.is_empty() {
                assert!(matches!(spec.layers[l], crate::model::LayerSpec::Relu));
            }
        }
        key.validate(&spec).unwrap();
    }

    #[test]
    fn distinct_seeds_overlap_near_beta_squared() {
        let spec = ModelSpec::lenet5();
        let beta = 0.1f64;
        let a = generate_key(&spec, beta as f32, DEFAULT_THRESHOLD, 100).unwrap();
        let b = generate_key(&spec, beta as f32, DEFAULT_THRESHOLD, 200).unwrap();
        let mut overlap = 0usize;
        let mut total = 0usize;
        let shapes = spec.output_shapes().unwrap();
        for l in spec.relu_layers() {
            let set: std::collections::HashSet<usize> = a.masks[l].iter().copied().collect();
            overlap += b.masks[l].iter().filter(|i| set.contains(i)).count();
            total += shapes[l].iter().product::<usize>();
        }
        // overlap ~ Binomial(total, beta^2): mean 65.1, sd ~ 8.05 for lenet5
        let mean = total as f64 * beta * beta;
        let sd = (total as f64 * beta * beta * (1.0 - beta * beta)).sqrt();
        assert!(
            (overlap as f64 - mean).abs() < 5.0 * sd,
            "overlap {overlap} vs expected {mean:.1} +- {sd:.1}"
        );
    }

    #[test]
    fn calibrate_lite_zero_activations_give_zero_threshold() {
        let spec = ModelSpec::tiny();
        let mut params = Parameters::init(&spec, 3).unwrap();
        params.scale(0.0);
        let key = generate_key(&spec, 0.3, DEFAULT_THRESHOLD, 4).unwrap();
        let ds = synthetic_fixture(FixtureKind::Separable, 6, 0);
        let calibrated = calibrate_lite(&spec, &params, &key, &ds).unwrap();
        for (l, mask) in calibrated.masks.iter().enumerate() {
            if !mask.is_empty() {
                assert_eq!(calibrated.thresholds[l], 0.0);
            }
        }
    }

    #[test]
    fn calibrate_lite_tracks_new_maximum() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 5).unwrap();
        let key = generate_key(&spec, 0.4, DEFAULT_THRESHOLD, 6).unwrap();
        let small = synthetic_fixture(FixtureKind::Constant, 4, 0);
        let t_small = calibrate_lite(&spec, &params, &key, &small).unwrap();
        // a brighter dataset can only push thresholds up
        let bright = synthetic_fixture(FixtureKind::Corner, 4, 0);
        let t_bright = calibrate_lite(&spec, &params, &key, &bright).unwrap();
        for l in 0..spec.num_layers() {
            if !key.masks[l].is_empty() {
                assert!(t_bright.thresholds[l] >= 0.0);
                assert!(t_small.thresholds[l] >= 0.0);
            }
        }
    }

    #[test]
    fn calibrated_key_raises_no_alarms_on_its_dataset() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 8).unwrap();
        let key = generate_key(&spec, 0.4, DEFAULT_THRESHOLD, 9).unwrap();
        let ds = synthetic_fixture(FixtureKind::Separable, 20, 1);
        let calibrated = calibrate_lite(&spec, &params, &key, &ds).unwrap();
        for i in 0..ds.len() {
            let d = detect(&spec, &params, &calibrated, &ds.image(i), 1).unwrap();
            assert_eq!(d.verdict, Verdict::Benign, "sample {i}");
        }
    }

    #[test]
    fn certify_epsilon_zero_equates_bound_sets() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 10).unwrap();
        let key = generate_key(&spec, 0.4, DEFAULT_THRESHOLD, 11).unwrap();
        let ds = synthetic_fixture(FixtureKind::Separable, 10, 2);
        let cert = certify(&spec, &params, &key, &ds, 0.0).unwrap();
        for layer in &cert.layers {
            for (lm, (sm, r)) in layer
                .loose_margins
                .iter()
                .zip(layer.strict_margins.iter().zip(layer.r_values.iter()))
            {
                // with eps = 0 the adversarial box is the natural box, so
                // strict margin = B_low - T while loose = T - B_up; their sum
                // is -(box width) <= 0, and r = |loose|
                assert!(lm + sm <= 1e-6);
                assert!((r - lm.abs()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn widening_epsilon_never_raises_strict_margins() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 12).unwrap();
        let key = generate_key(&spec, 0.4, DEFAULT_THRESHOLD, 13).unwrap();
        let ds = synthetic_fixture(FixtureKind::Separable, 10, 3);
        let small = certify(&spec, &params, &key, &ds, 1e-3).unwrap();
        let large = certify(&spec, &params, &key, &ds, 1e-1).unwrap();
        for (a, b) in small.layers.iter().zip(large.layers.iter()) {
            for (ms, ml) in a.strict_margins.iter().zip(b.strict_margins.iter()) {
                assert!(ml <= &(ms + 1e-6));
            }
        }
    }
}
