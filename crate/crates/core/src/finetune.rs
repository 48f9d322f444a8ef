//! Fine-tuning with the detection and certification losses.
//!
//! Each batch runs the concrete forward pass (natural activations are point
//! evaluations), propagates interval bounds for the per-sample adversarial
//! box `[x-eps, x+eps]` clipped to [0, 1], and optimizes
//! `CE + alpha_d * L_D + alpha_c * L_C` with RMSProp. `alpha_d` follows the
//! annealing schedule and is zero during the warm phase, which optimizes the
//! certification loss first.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interval::{backward_bounds, propagate_bounds_prepared, BoundTag, IntervalTensor};
use crate::model::{backward_with_activation_grads, forward_with_cache, ModelSpec, Parameters};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::taboo::{reg_losses_with_grads, CttMode, DetectLossForm, TabooKey};
use crate::tensor::{argmax, softmax_cross_entropy, Tensor};
use crate::train::evaluate_accuracy;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Annealing schedule for the regularization weight alpha.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AnnealSchedule {
    /// Epochs with `alpha = 0` for the detection loss while the
    /// certification loss is already active.
    pub warm_epochs: usize,
    /// Additive step applied every `increment_period` epochs after warm-up.
    pub alpha_increment: f32,
    /// Epochs between increments.
    pub increment_period: usize,
    /// Cap on alpha (and on the warm-phase certification weight).
    pub alpha_max: f32,
    /// Weight on the certification loss during the warm phase; after warm-up
    /// the certification loss follows `max(alpha, this)`, still capped by
    /// `alpha_max`.
    pub warm_certify_weight: f32,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            warm_epochs: 2,
            alpha_increment: 0.005,
            increment_period: 6,
            alpha_max: 0.05,
            warm_certify_weight: 0.005,
        }
    }
}

/// Alpha at a given epoch: zero through the warm phase, then an additive
/// staircase capped at `alpha_max`. Nondecreasing in `epoch`.
pub fn anneal(epoch: usize, schedule: &AnnealSchedule) -> f32 {
    if epoch < schedule.warm_epochs {
        return 0.0;
    }
    let period = schedule.increment_period.max(1);
    let steps = (epoch - schedule.warm_epochs) / period + 1;
    (schedule.alpha_increment * steps as f32).min(schedule.alpha_max)
}

/// Knobs for [`finetune`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: CttMode,
    pub epsilon: f32,
    pub schedule: AnnealSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub detect_loss_form: DetectLossForm,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            mode: CttMode::Loose,
            epsilon: 3e-3,
            schedule: AnnealSchedule::default(),
            epochs: 24,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            detect_loss_form: DetectLossForm::ActivationSum,
        }
    }
}

/// Telemetry for one fine-tuning epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FinetuneEpochStats {
    pub epoch: usize,
    pub alpha: f32,
    pub mean_ce: f32,
    pub mean_detect_loss: f32,
    pub mean_certify_loss: f32,
    pub train_accuracy: f32,
}

/// Fine-tuned parameters, the (unchanged) key, per-epoch telemetry and a
/// convergence verdict.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: Parameters,
    pub key: TabooKey,
    pub history: Vec<FinetuneEpochStats>,
    /// False when training collapsed (e.g. epsilon below the trainable
    /// floor): final train accuracy under 0.9x the pre-fine-tune accuracy.
    pub converged: bool,
}

impl FinetuneOutcome {
    pub fn final_stats(&self) -> Option<&FinetuneEpochStats> {
        self.history.last()
    }
}

struct SampleGrads {
    grads: Parameters,
    ce: f32,
    detect: f32,
    certify: f32,
    correct: bool,
}

fn sample_gradients(
    spec: &ModelSpec,
    params: &Parameters,
    abs_params: &Parameters,
    shapes: &[Vec<usize>],
    key: &TabooKey,
    config: &FinetuneConfig,
    alpha_d: f32,
    alpha_c: f32,
    x: &Tensor,
    y: usize,
) -> Result<SampleGrads> {
    let pass = forward_with_cache(spec, params, x)?;
    let (ce, grad_logits) = softmax_cross_entropy(&pass.logits, y)?;
    let correct = argmax(&pass.logits) == y;

    if alpha_d == 0.0 && alpha_c == 0.0 {
        // regularizers disabled: plain cross-entropy step
        let (grads, _) = backward_with_activation_grads(spec, params, &pass.caches, &grad_logits, None)?;
        return Ok(SampleGrads { grads, ce, detect: 0.0, certify: 0.0, correct });
    }

    let adv_box = IntervalTensor::linf_ball_clipped(x, config.epsilon, 0.0, 1.0);
    let (adv_bounds, interval_caches) = propagate_bounds_prepared(
        spec,
        params,
        abs_params,
        &adv_box,
        BoundTag::Adversarial { epsilon: config.epsilon },
    )?;
    let (losses, mut act_grads, mut bound_grads) = reg_losses_with_grads(
        &pass.activations,
        &adv_bounds,
        key,
        config.mode,
        config.detect_loss_form,
        true,
    )?;

    for g in act_grads.iter_mut().flatten() {
        for v in g.data_mut() {
            *v *= alpha_d;
        }
    }
    for (gl, gu) in bound_grads.iter_mut().flatten() {
        for v in gl.data_mut() {
            *v *= alpha_c;
        }
        for v in gu.data_mut() {
            *v *= alpha_c;
        }
    }

    let act_slice = (alpha_d > 0.0).then_some(act_grads.as_slice());
    let (mut grads, _) =
        backward_with_activation_grads(spec, params, &pass.caches, &grad_logits, act_slice)?;
    if alpha_c > 0.0 {
        let interval_grads =
            backward_bounds(spec, params, abs_params, &interval_caches, shapes, &bound_grads)?;
        grads.add_scaled(&interval_grads, 1.0)?;
    }
    Ok(SampleGrads { grads, ce, detect: losses.detect, certify: losses.certify, correct })
}

/// Fine-tune a pretrained network so masked neurons stay quiet on natural
/// inputs while their adversarial-box bounds clear the thresholds.
/// Deterministic given `config.seed`.
pub fn finetune(
    spec: &ModelSpec,
    pretrained: &Parameters,
    key: &TabooKey,
    dataset: &Dataset,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    finetune_with_snapshots(spec, pretrained, key, dataset, config, &[]).map(|(o, _)| o)
}

/// As [`finetune`], additionally cloning the parameters right after each
/// listed epoch index completes (the false-positive sweep evaluates these
/// intermediate states).
pub fn finetune_with_snapshots(
    spec: &ModelSpec,
    pretrained: &Parameters,
    key: &TabooKey,
    dataset: &Dataset,
    config: &FinetuneConfig,
    snapshot_epochs: &[usize],
) -> Result<(FinetuneOutcome, Vec<(usize, Parameters)>)> {
    if config.mode == CttMode::Lite {
        return Err(Error::InvalidParameter {
            name: "mode",
            detail: "lite mode needs no fine-tuning; use calibrate_lite".into(),
        });
    }
    if config.epsilon <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "epsilon",
            detail: format!("must be positive, got {}", config.epsilon),
        });
    }
    key.validate(spec)?;
    let shapes = spec.output_shapes()?;

    // reference accuracy for the convergence check, on a bounded subsample
    let probe = dataset.subsample_indices(2000, config.seed ^ 0x9e37);
    let reference_accuracy = evaluate_accuracy(spec, pretrained, dataset, Some(&probe))?;

    let mut params = pretrained.clone();
    let mut optimizer = RmsProp::new(
        &params,
        RmsPropConfig { learning_rate: config.learning_rate, ..RmsPropConfig::default() },
    );
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let alpha = anneal(epoch, &config.schedule);
        let alpha_c = alpha.max(config.schedule.warm_certify_weight).min(config.schedule.alpha_max);
        let mut ce_sum = 0.0f64;
        let mut detect_sum = 0.0f64;
        let mut certify_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for (images, labels) in dataset.batches(config.batch_size, config.seed ^ epoch as u64, true) {
            let abs_params = params.abs_weights();
            let per_sample: Vec<Result<SampleGrads>> = images
                .par_iter()
                .zip(labels.par_iter())
                .map(|(x, &y)| {
                    sample_gradients(
                        spec, &params, &abs_params, &shapes, key, config, alpha, alpha_c, x, y,
                    )
                })
                .collect();
            let mut total = Parameters::zeros_like(&params);
            for item in per_sample {
                let s = item?;
                total.add_scaled(&s.grads, 1.0)?;
                ce_sum += s.ce as f64;
                detect_sum += s.detect as f64;
                certify_sum += s.certify as f64;
                correct += s.correct as usize;
            }
            total.scale(1.0 / images.len().max(1) as f32);
            optimizer.step(&mut params, &total);
            seen += images.len();
        }

        history.push(FinetuneEpochStats {
            epoch,
            alpha,
            mean_ce: (ce_sum / seen.max(1) as f64) as f32,
            mean_detect_loss: (detect_sum / seen.max(1) as f64) as f32,
            mean_certify_loss: (certify_sum / seen.max(1) as f64) as f32,
            train_accuracy: correct as f32 / seen.max(1) as f32,
        });
    }

    let final_acc = history.last().map(|s| s.train_accuracy).unwrap_or(0.0);
    let converged = final_acc >= 0.9 * reference_accuracy;
    Ok(FinetuneOutcome { params, key: key.clone(), history, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_fixture, FixtureKind};
    use crate::taboo::generate_key;
    use crate::train::{train_baseline, TrainConfig};

    #[test]
    fn anneal_is_zero_through_warm_phase() {
        let s = AnnealSchedule { warm_epochs: 5, ..AnnealSchedule::default() };
        assert_eq!(anneal(0, &s), 0.0);
        assert_eq!(anneal(4, &s), 0.0);
    }

    #[test]
    fn anneal_first_post_warm_step_is_one_increment() {
        let s = AnnealSchedule {
            warm_epochs: 5,
            alpha_increment: 0.005,
            increment_period: 6,
            alpha_max: 1.0,
            warm_certify_weight: 0.005,
        };
        assert!((anneal(5, &s) - 0.005).abs() < 1e-9);
        assert!((anneal(10, &s) - 0.005).abs() < 1e-9);
        assert!((anneal(11, &s) - 0.010).abs() < 1e-9);
    }

    #[test]
    fn anneal_saturates_at_alpha_max() {
        let s = AnnealSchedule {
            warm_epochs: 0,
            alpha_increment: 0.01,
            increment_period: 1,
            alpha_max: 0.03,
            warm_certify_weight: 0.0,
        };
        assert!((anneal(1000, &s) - 0.03).abs() < 1e-9);
        let mut last = 0.0;
        for e in 0..50 {
            let a = anneal(e, &s);
            assert!(a >= last, "alpha decreased at epoch {e}");
            last = a;
        }
    }

    #[test]
    fn rejects_lite_mode_and_bad_epsilon() {
        let spec = ModelSpec::tiny();
        let params = Parameters::init(&spec, 0).unwrap();
        let key = generate_key(&spec, 0.3, 1e-4, 0).unwrap();
        let ds = synthetic_fixture(FixtureKind::Separable, 8, 0);
        let bad_mode = FinetuneConfig { mode: CttMode::Lite, epochs: 1, ..Default::default() };
        assert!(finetune(&spec, &params, &key, &ds, &bad_mode).is_err());
        let bad_eps = FinetuneConfig { epsilon: 0.0, epochs: 1, ..Default::default() };
        assert!(finetune(&spec, &params, &key, &ds, &bad_eps).is_err());
    }

    #[test]
    fn disabled_regularizers_match_plain_training_accuracy() {
        let spec = ModelSpec::tiny();
        let ds = synthetic_fixture(FixtureKind::Separable, 32, 4);
        let base = train_baseline(
            &spec,
            &ds,
            &TrainConfig { epochs: 10, batch_size: 8, learning_rate: 5e-3, seed: 3 },
        )
        .unwrap();
        let key = generate_key(&spec, 0.2, 1e-4, 1).unwrap();
        let config = FinetuneConfig {
            mode: CttMode::Loose,
            epsilon: 1e-3,
            schedule: AnnealSchedule {
                warm_epochs: 0,
                alpha_increment: 0.0,
                increment_period: 1,
                alpha_max: 0.0,
                warm_certify_weight: 0.0,
            },
            epochs: 3,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 5,
            detect_loss_form: DetectLossForm::ActivationSum,
        };
        let tuned = finetune(&spec, &base.params, &key, &ds, &config).unwrap();
        let acc_before = evaluate_accuracy(&spec, &base.params, &ds, None).unwrap();
        let acc_after = evaluate_accuracy(&spec, &tuned.params, &ds, None).unwrap();
        assert!(
            (acc_before - acc_after).abs() <= 0.15,
            "alpha_max = 0 should reduce to baseline training: {acc_before} -> {acc_after}"
        );
        assert!(tuned.converged);
    }

    #[test]
    fn finetune_suppresses_masked_natural_activations() {
        let spec = ModelSpec::tiny();
        let ds = synthetic_fixture(FixtureKind::Separable, 48, 7);
        let base = train_baseline(
            &spec,
            &ds,
            &TrainConfig { epochs: 15, batch_size: 8, learning_rate: 5e-3, seed: 11 },
        )
        .unwrap();
        let key = generate_key(&spec, 0.25, 1e-4, 21).unwrap();
        assert!(key.instrumented_count() > 0);
        let config = FinetuneConfig {
            mode: CttMode::Loose,
            epsilon: 5e-3,
            schedule: AnnealSchedule {
                warm_epochs: 1,
                alpha_increment: 0.01,
                increment_period: 2,
                alpha_max: 0.05,
                warm_certify_weight: 0.005,
            },
            epochs: 12,
            batch_size: 8,
            learning_rate: 2e-3,
            seed: 13,
            detect_loss_form: DetectLossForm::ActivationSum,
        };
        let tuned = finetune(&spec, &base.params, &key, &ds, &config).unwrap();

        let mean_masked = |params: &Parameters| -> f32 {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for i in 0..ds.len() {
                let pass = forward_with_cache(&spec, params, &ds.image(i)).unwrap();
                for (l, mask) in key.masks.iter().enumerate() {
                    for &idx in mask {
                        sum += pass.activations[l].data()[idx] as f64;
                        count += 1;
                    }
                }
            }
            (sum / count.max(1) as f64) as f32
        };
        let before = mean_masked(&base.params);
        let after = mean_masked(&tuned.params);
        assert!(
            after < before,
            "fine-tuning should suppress masked natural activations: {before} -> {after}"
        );
    }

    #[test]
    fn finetune_is_deterministic() {
        let spec = ModelSpec::tiny();
        let ds = synthetic_fixture(FixtureKind::Separable, 16, 2);
        let base = train_baseline(
            &spec,
            &ds,
            &TrainConfig { epochs: 3, batch_size: 8, learning_rate: 5e-3, seed: 1 },
        )
        .unwrap();
        let key = generate_key(&spec, 0.3, 1e-4, 2).unwrap();
        let config = FinetuneConfig { epochs: 3, batch_size: 8, ..Default::default() };
        let a = finetune(&spec, &base.params, &key, &ds, &config).unwrap();
        let b = finetune(&spec, &base.params, &key, &ds, &config).unwrap();
        assert_eq!(a.params, b.params);
    }
}
