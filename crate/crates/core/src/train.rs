//! Baseline training loop and dataset-level profiling.

use crate::data::Dataset;
use crate::error::Result;
use crate::interval::IntervalTensor;
use crate::model::{backward, forward, forward_with_cache, ModelSpec, Parameters};
use crate::optim::{RmsProp, RmsPropConfig};
use crate::tensor::{argmax, softmax_cross_entropy, Tensor};
use rayon::prelude::*;

/// Knobs for [`train_baseline`].
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 10, batch_size: 64, learning_rate: 1e-3, seed: 0 }
    }
}

/// Loss/accuracy telemetry for one epoch.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f32,
    pub train_accuracy: f32,
}

/// Trained parameters plus recorded per-epoch statistics.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub history: Vec<EpochStats>,
}

impl TrainOutcome {
    pub fn final_train_accuracy(&self) -> f32 {
        self.history.last().map(|s| s.train_accuracy).unwrap_or(0.0)
    }
}

/// Mean cross-entropy gradient over one batch. Per-sample work fans out over
/// the thread pool; the reduction is sequential in sample order so results
/// are bit-stable regardless of worker count.
pub(crate) fn batch_gradients(
    spec: &ModelSpec,
    params: &Parameters,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(Parameters, f32, usize)> {
    let per_sample: Vec<Result<(Parameters, f32, bool)>> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let pass = forward_with_cache(spec, params, x)?;
            let (loss, grad_logits) = softmax_cross_entropy(&pass.logits, y)?;
            let correct = argmax(&pass.logits) == y;
            let (grads, _) = backward(spec, params, &pass.caches, &grad_logits)?;
            Ok((grads, loss, correct))
        })
        .collect();

    let mut total = Parameters::zeros_like(params);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for item in per_sample {
        let (grads, loss, ok) = item?;
        total.add_scaled(&grads, 1.0)?;
        loss_sum += loss as f64;
        correct += ok as usize;
    }
    let n = images.len().max(1) as f32;
    total.scale(1.0 / n);
    Ok((total, (loss_sum / n as f64) as f32, correct))
}

/// Train a freshly initialized network with RMSProp and cross-entropy.
/// Deterministic given `config.seed`.
pub fn train_baseline(spec: &ModelSpec, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut params = Parameters::init(spec, config.seed)?;
    let outcome = train_epochs(spec, &mut params, dataset, config, RmsPropConfig {
        learning_rate: config.learning_rate,
        ..RmsPropConfig::default()
    })?;
    Ok(TrainOutcome { params, history: outcome })
}

/// Continue training existing parameters; shared by baseline training and by
/// the ablation path that fine-tunes with the regularizers disabled.
pub fn train_epochs(
    spec: &ModelSpec,
    params: &mut Parameters,
    dataset: &Dataset,
    config: &TrainConfig,
    optim_config: RmsPropConfig,
) -> Result<Vec<EpochStats>> {
    let mut optimizer = RmsProp::new(params, optim_config);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (images, labels) in dataset.batches(config.batch_size, config.seed ^ epoch as u64, true) {
            let (grads, mean_loss, batch_correct) = batch_gradients(spec, params, &images, &labels)?;
            optimizer.step(params, &grads);
            loss_sum += mean_loss as f64 * images.len() as f64;
            correct += batch_correct;
            seen += images.len();
        }
        history.push(EpochStats {
            epoch,
            mean_loss: (loss_sum / seen.max(1) as f64) as f32,
            train_accuracy: correct as f32 / seen.max(1) as f32,
        });
    }
    Ok(history)
}

/// Classification accuracy over an index subset (or the whole set).
pub fn evaluate_accuracy(
    spec: &ModelSpec,
    params: &Parameters,
    dataset: &Dataset,
    indices: Option<&[usize]>,
) -> Result<f32> {
    let idx: Vec<usize> = match indices {
        Some(list) => list.to_vec(),
        None => (0..dataset.len()).collect(),
    };
    if idx.is_empty() {
        return Ok(0.0);
    }
    let correct: usize = idx
        .par_iter()
        .map(|&i| {
            let logits = forward(spec, params, &dataset.image(i))?;
            Ok(usize::from(argmax(&logits) == dataset.label(i)))
        })
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .sum();
    Ok(correct as f32 / idx.len() as f32)
}

/// Per-pixel min/max over the training set: the natural input box bound
/// propagation starts from.
pub fn profile_input_bounds(dataset: &Dataset) -> IntervalTensor {
    dataset.pixel_bounds()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_fixture, FixtureKind};
    use crate::model::ModelSpec;

    #[test]
    fn overfits_eight_samples() {
        let spec = ModelSpec::tiny();
        let ds = synthetic_fixture(FixtureKind::Separable, 8, 3);
        // 500 optimizer steps: 8 samples per batch, 500 epochs of 1 batch
        let config = TrainConfig { epochs: 500, batch_size: 8, learning_rate: 5e-3, seed: 1 };
        let outcome = train_baseline(&spec, &ds, &config).unwrap();
        assert_eq!(outcome.final_train_accuracy(), 1.0, "history: {:?}", outcome.history.last());
        let acc = evaluate_accuracy(&spec, &outcome.params, &ds, None).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let spec = ModelSpec::tiny();
        let ds = synthetic_fixture(FixtureKind::Separable, 12, 5);
        let config = TrainConfig { epochs: 3, batch_size: 4, learning_rate: 1e-3, seed: 77 };
        let a = train_baseline(&spec, &ds, &config).unwrap();
        let b = train_baseline(&spec, &ds, &config).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn separable_fixture_trains_to_perfect_accuracy() {
        let spec = ModelSpec::tiny();
        let ds = synthetic_fixture(FixtureKind::Separable, 64, 9);
        let config = TrainConfig { epochs: 25, batch_size: 8, learning_rate: 5e-3, seed: 2 };
        let outcome = train_baseline(&spec, &ds, &config).unwrap();
        assert_eq!(outcome.final_train_accuracy(), 1.0);
    }
}
