//! Adversarial example generation: white-box gradient attacks, the
//! coordinate-wise finite-difference black-box variant, an optimization
//! attack and a decision-based attack.
//!
//! Attacks see only the classifier (spec + parameters); none of them takes a
//! taboo key or detector state. Every returned example re-measures its own
//! norms from the stored tensors.

mod boundary;
mod cw;
mod deepfool;

pub use boundary::boundary_attack;
pub use cw::cw_l2;
pub use deepfool::deepfool;

use crate::checkpoint::{read_container, write_container};
use crate::error::{Error, Result};
use crate::model::{backward, forward, forward_with_cache, seeded_rng, ModelSpec, Parameters};
use crate::tensor::{argmax, softmax_cross_entropy, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Attack families implemented by [`run_attack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    FgmL2,
    Bim,
    L2Bim,
    Pgd,
    CwL2,
    Deepfool,
    Boundary,
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "fgm" | "fgm_l2" => Ok(AttackMethod::FgmL2),
            "bim" => Ok(AttackMethod::Bim),
            "l2_bim" | "l2bim" => Ok(AttackMethod::L2Bim),
            "pgd" => Ok(AttackMethod::Pgd),
            "cw" | "cw_l2" => Ok(AttackMethod::CwL2),
            "deepfool" => Ok(AttackMethod::Deepfool),
            "boundary" => Ok(AttackMethod::Boundary),
            other => Err(Error::InvalidParameter {
                name: "method",
                detail: format!("unknown attack '{other}'"),
            }),
        }
    }
}

/// Perturbation norm an attack is budgeted under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    LInf,
    L2,
}

/// Where input gradients come from: the analytic backward pass, or
/// coordinate-wise central finite differences of the loss (black-box).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSource {
    Analytic,
    Estimated { delta: f32 },
}

/// Full parameterization of one attack run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub norm: Norm,
    /// Perturbation budget epsilon, or the constant `c` for CW.
    pub budget: f32,
    pub steps: usize,
    /// Per-step size; `None` means budget / steps.
    pub step_size: Option<f32>,
    pub random_start: bool,
    /// Stop an iterative attack at its first misclassification
    /// (fixed-budget protocol); otherwise always run all steps.
    pub early_stop: bool,
    pub gradient_source: GradientSource,
    pub seed: u64,
    /// CW confidence margin.
    pub confidence: f32,
    /// CW inner learning rate.
    pub cw_learning_rate: f32,
    /// CW binary search steps over `c` (1 = use `budget` as-is).
    pub binary_search_steps: usize,
    /// Deepfool overshoot factor.
    pub overshoot: f32,
    /// Boundary-attack candidate draws per iteration.
    pub trials_per_iter: usize,
}

impl AttackSpec {
    fn base(method: AttackMethod, norm: Norm, budget: f32) -> Self {
        AttackSpec {
            method,
            norm,
            budget,
            steps: 1,
            step_size: None,
            random_start: false,
            early_stop: false,
            gradient_source: GradientSource::Analytic,
            seed: 0,
            confidence: 0.1,
            cw_learning_rate: 0.01,
            binary_search_steps: 1,
            overshoot: 0.02,
            trials_per_iter: 25,
        }
    }

    pub fn fgsm(eps: f32) -> Self {
        Self::base(AttackMethod::Fgsm, Norm::LInf, eps)
    }

    pub fn fgm_l2(eps: f32) -> Self {
        Self::base(AttackMethod::FgmL2, Norm::L2, eps)
    }

    pub fn bim(eps: f32, steps: usize) -> Self {
        AttackSpec { steps, ..Self::base(AttackMethod::Bim, Norm::LInf, eps) }
    }

    pub fn l2_bim(eps: f32, steps: usize) -> Self {
        AttackSpec { steps, ..Self::base(AttackMethod::L2Bim, Norm::L2, eps) }
    }

    pub fn pgd(eps: f32, steps: usize) -> Self {
        AttackSpec {
            steps,
            random_start: true,
            ..Self::base(AttackMethod::Pgd, Norm::LInf, eps)
        }
    }

    /// CW with the standard fixed-parameter setup: 1000 steps, lr 0.01,
    /// confidence 0.1, single `c`.
    pub fn cw(c: f32) -> Self {
        AttackSpec { steps: 1000, ..Self::base(AttackMethod::CwL2, Norm::L2, c) }
    }

    pub fn deepfool(max_steps: usize) -> Self {
        AttackSpec { steps: max_steps, ..Self::base(AttackMethod::Deepfool, Norm::L2, 0.0) }
    }

    pub fn boundary(iterations: usize) -> Self {
        AttackSpec { steps: iterations, ..Self::base(AttackMethod::Boundary, Norm::L2, 0.0) }
    }

    pub fn with_gradient_source(mut self, source: GradientSource) -> Self {
        self.gradient_source = source;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_early_stop(mut self, on: bool) -> Self {
        self.early_stop = on;
        self
    }

    /// Effective per-step size: explicit, or budget / steps.
    pub fn effective_step_size(&self) -> f32 {
        self.step_size.unwrap_or(self.budget / self.steps.max(1) as f32)
    }

    /// Human-readable tag for reports, e.g. `fgsm(eps=0.1)`.
    pub fn label(&self) -> String {
        match self.method {
            AttackMethod::Fgsm => format!("fgsm(eps={})", self.budget),
            AttackMethod::FgmL2 => format!("fgm_l2(eps={})", self.budget),
            AttackMethod::Bim => format!("bim(eps={},steps={})", self.budget, self.steps),
            AttackMethod::L2Bim => format!("l2_bim(eps={},steps={})", self.budget, self.steps),
            AttackMethod::Pgd => format!("pgd(eps={},steps={})", self.budget, self.steps),
            AttackMethod::CwL2 => format!("cw_l2(c={})", self.budget),
            AttackMethod::Deepfool => format!("deepfool(max_steps={})", self.steps),
            AttackMethod::Boundary => format!("boundary(iters={})", self.steps),
        }
    }
}

/// What an attack run reported about itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Ok,
    /// Gradient was identically zero; input returned unchanged.
    ZeroGradient,
    /// Ran out of iterations without success; best iterate returned.
    NotConverged,
}

/// One adversarial example with its measured norms.
#[derive(Debug, Clone)]
pub struct AdvExample {
    pub original: Tensor,
    pub perturbed: Tensor,
    pub original_label: usize,
    pub predicted_label: usize,
    pub success: bool,
    pub l2: f32,
    pub linf: f32,
    pub queries: usize,
    pub status: AttackStatus,
}

impl AdvExample {
    /// Assemble an example, measuring norms from the tensors themselves.
    pub fn measure(
        spec: &ModelSpec,
        params: &Parameters,
        original: Tensor,
        perturbed: Tensor,
        original_label: usize,
        queries: usize,
        status: AttackStatus,
    ) -> Result<Self> {
        let logits = forward(spec, params, &perturbed)?;
        let predicted_label = argmax(&logits);
        let l2 = original.l2_distance(&perturbed);
        let linf = original.linf_distance(&perturbed);
        Ok(AdvExample {
            success: predicted_label != original_label,
            original,
            perturbed,
            original_label,
            predicted_label,
            l2,
            linf,
            queries,
            status,
        })
    }
}

/// Cross-entropy loss and its input gradient from the configured source.
/// Returns (loss, gradient, queries).
pub fn loss_and_input_grad(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    source: GradientSource,
) -> Result<(f32, Tensor, usize)> {
    match source {
        GradientSource::Analytic => {
            let pass = forward_with_cache(spec, params, x)?;
            let (loss, grad_logits) = softmax_cross_entropy(&pass.logits, y)?;
            let (_, grad_input) = backward(spec, params, &pass.caches, &grad_logits)?;
            Ok((loss, grad_input, 1))
        }
        GradientSource::Estimated { delta } => {
            let loss = cross_entropy_at(spec, params, x, y)?;
            let (grad, queries) =
                estimate_gradient_of(|probe| cross_entropy_at(spec, params, probe, y), x, delta)?;
            Ok((loss, grad, queries))
        }
    }
}

fn cross_entropy_at(spec: &ModelSpec, params: &Parameters, x: &Tensor, y: usize) -> Result<f32> {
    let logits = forward(spec, params, x)?;
    Ok(softmax_cross_entropy(&logits, y)?.0)
}

/// Coordinate-wise central differences of an arbitrary scalar function:
/// `g[i] = (f(x + delta e_i) - f(x - delta e_i)) / (2 delta)`.
/// Query count is `2 * dim(x)`.
pub fn estimate_gradient_of(
    f: impl Fn(&Tensor) -> Result<f32>,
    x: &Tensor,
    delta: f32,
) -> Result<(Tensor, usize)> {
    if delta <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "delta",
            detail: format!("finite-difference step must be positive, got {delta}"),
        });
    }
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + delta;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - delta;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * delta);
    }
    Ok((grad, 2 * x.len()))
}

/// Estimated cross-entropy gradient (the black-box "w/ GE" configuration).
pub fn estimate_gradient(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    delta: f32,
) -> Result<(Tensor, usize)> {
    estimate_gradient_of(|probe| cross_entropy_at(spec, params, probe, y), x, delta)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2_norm(t: &Tensor) -> f32 {
    let acc: f64 = t.data().iter().map(|&v| v as f64 * v as f64).sum();
    acc.sqrt() as f32
}

/// One signed-gradient step of size eps, clipped to [0, 1].
pub fn fgsm(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    eps: f32,
    source: GradientSource,
) -> Result<AdvExample> {
    let (_, grad, queries) = loss_and_input_grad(spec, params, x, y, source)?;
    if grad.data().iter().all(|&v| v == 0.0) {
        return AdvExample::measure(spec, params, x.clone(), x.clone(), y, queries, AttackStatus::ZeroGradient);
    }
    let mut adv = x.clone();
    for (v, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + eps * sign(g)).clamp(0.0, 1.0);
    }
    AdvExample::measure(spec, params, x.clone(), adv, y, queries, AttackStatus::Ok)
}

/// One normalized-gradient step of l2 length eps, clipped to [0, 1].
pub fn fgm_l2(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    eps: f32,
    source: GradientSource,
) -> Result<AdvExample> {
    let (_, grad, queries) = loss_and_input_grad(spec, params, x, y, source)?;
    let norm = l2_norm(&grad);
    if norm == 0.0 {
        return AdvExample::measure(spec, params, x.clone(), x.clone(), y, queries, AttackStatus::ZeroGradient);
    }
    let mut adv = x.clone();
    for (v, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
        *v = (*v + eps * g / norm).clamp(0.0, 1.0);
    }
    AdvExample::measure(spec, params, x.clone(), adv, y, queries, AttackStatus::Ok)
}

/// Project `adv` so `adv - origin` fits the norm ball, then clip to [0, 1].
/// Clipping toward the box only shrinks per-pixel deviations (origin lies in
/// the box), so both constraints hold afterwards.
fn project(adv: &mut Tensor, origin: &Tensor, norm: Norm, eps: f32) {
    match norm {
        Norm::LInf => {
            for (v, &o) in adv.data_mut().iter_mut().zip(origin.data()) {
                *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let mut delta: Vec<f32> =
                adv.data().iter().zip(origin.data()).map(|(&a, &o)| a - o).collect();
            let norm_val = (delta.iter().map(|&d| d as f64 * d as f64).sum::<f64>()).sqrt() as f32;
            if norm_val > eps && norm_val > 0.0 {
                let scale = eps / norm_val;
                for d in &mut delta {
                    *d *= scale;
                }
            }
            for ((v, &o), d) in adv.data_mut().iter_mut().zip(origin.data()).zip(delta) {
                *v = (o + d).clamp(0.0, 1.0);
            }
        }
    }
}

/// Uniform random point inside the norm ball around `x`, clipped to [0, 1].
fn random_start<R: Rng>(x: &Tensor, norm: Norm, eps: f32, rng: &mut R) -> Tensor {
    let mut out = x.clone();
    match norm {
        Norm::LInf => {
            for v in out.data_mut() {
                *v = (*v + rng.gen_range(-eps..=eps)).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let dim = x.len();
            let mut dir: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm_val = (dir.iter().map(|&d| d as f64 * d as f64).sum::<f64>()).sqrt() as f32;
            if norm_val > 0.0 {
                let radius = eps * (rng.gen::<f32>()).powf(1.0 / dim as f32);
                for d in &mut dir {
                    *d *= radius / norm_val;
                }
                for (v, d) in out.data_mut().iter_mut().zip(dir) {
                    *v = (*v + d).clamp(0.0, 1.0);
                }
            }
        }
    }
    out
}

/// Iterated gradient attack covering BIM, L2-BIM and PGD: repeated signed or
/// normalized steps, projected onto the budget ball and [0, 1] after each.
pub fn iterative_attack(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    attack: &AttackSpec,
) -> Result<AdvExample> {
    if attack.steps < 1 {
        return Err(Error::InvalidParameter { name: "steps", detail: "must be >= 1".into() });
    }
    let eps = attack.budget;
    let step = attack.effective_step_size();
    let mut queries = 0usize;
    let mut rng = seeded_rng(attack.seed, 0xa77acc);
    let mut adv = if attack.random_start {
        let mut start = random_start(x, attack.norm, eps, &mut rng);
        project(&mut start, x, attack.norm, eps);
        start
    } else {
        x.clone()
    };
    let mut status = AttackStatus::Ok;
    for _ in 0..attack.steps {
        if attack.early_stop {
            let logits = forward(spec, params, &adv)?;
            queries += 1;
            if argmax(&logits) != y {
                break;
            }
        }
        let (_, grad, q) = loss_and_input_grad(spec, params, &adv, y, attack.gradient_source)?;
        queries += q;
        if grad.data().iter().all(|&v| v == 0.0) {
            status = AttackStatus::ZeroGradient;
            break;
        }
        match attack.norm {
            Norm::LInf => {
                for (v, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
                    *v += step * sign(g);
                }
            }
            Norm::L2 => {
                let norm_val = l2_norm(&grad);
                for (v, &g) in adv.data_mut().iter_mut().zip(grad.data()) {
                    *v += step * g / norm_val;
                }
            }
        }
        project(&mut adv, x, attack.norm, eps);
    }
    AdvExample::measure(spec, params, x.clone(), adv, y, queries, status)
}

/// Dispatch an attack according to its spec. `sample_index` personalizes the
/// RNG stream so batches are reproducible sample-by-sample.
pub fn run_attack(
    spec: &ModelSpec,
    params: &Parameters,
    x: &Tensor,
    y: usize,
    attack: &AttackSpec,
    sample_index: u64,
) -> Result<AdvExample> {
    let seeded = AttackSpec {
        seed: attack.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(sample_index),
        ..*attack
    };
    match attack.method {
        AttackMethod::Fgsm => fgsm(spec, params, x, y, attack.budget, attack.gradient_source),
        AttackMethod::FgmL2 => fgm_l2(spec, params, x, y, attack.budget, attack.gradient_source),
        AttackMethod::Bim | AttackMethod::L2Bim | AttackMethod::Pgd => {
            iterative_attack(spec, params, x, y, &seeded)
        }
        AttackMethod::CwL2 => cw_l2(spec, params, x, y, &seeded),
        AttackMethod::Deepfool => deepfool(spec, params, x, y, &seeded),
        AttackMethod::Boundary => boundary_attack(spec, params, x, y, &seeded),
    }
}

/// Persist a batch of adversarial examples in the checkpoint container
/// format: tensors named `orig{i}`/`adv{i}`, labels and measured norms in
/// the metadata.
pub fn save_adv_batch(path: &Path, label: &str, examples: &[AdvExample]) -> Result<()> {
    let mut named: Vec<(String, &Tensor)> = Vec::with_capacity(2 * examples.len());
    for (i, ex) in examples.iter().enumerate() {
        named.push((format!("orig{i}"), &ex.original));
        named.push((format!("adv{i}"), &ex.perturbed));
    }
    let meta = serde_json::json!({
        "attack": label,
        "original_labels": examples.iter().map(|e| e.original_label).collect::<Vec<_>>(),
        "predicted_labels": examples.iter().map(|e| e.predicted_label).collect::<Vec<_>>(),
        "success": examples.iter().map(|e| e.success).collect::<Vec<_>>(),
        "l2": examples.iter().map(|e| e.l2).collect::<Vec<_>>(),
        "linf": examples.iter().map(|e| e.linf).collect::<Vec<_>>(),
        "queries": examples.iter().map(|e| e.queries).collect::<Vec<_>>(),
    });
    write_container(path, "advbatch", None, None, meta, &named)
}

/// Load a batch saved by [`save_adv_batch`], re-measuring success and norms
/// against the given model.
pub fn load_adv_batch(
    path: &Path,
    spec: &ModelSpec,
    params: &Parameters,
) -> Result<(String, Vec<AdvExample>)> {
    let (manifest, tensors) = read_container(path)?;
    if manifest.kind != "advbatch" {
        return Err(Error::CheckpointFormat(format!(
            "expected an adversarial batch, found kind '{}'",
            manifest.kind
        )));
    }
    let labels: Vec<usize> = manifest
        .meta
        .get("original_labels")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .ok_or_else(|| Error::CheckpointFormat("advbatch missing original_labels".into()))?;
    let attack_label = manifest
        .meta
        .get("attack")
        .and_then(|v| v.as_str())
        .unwrap_or("unknown")
        .to_string();
    let n = labels.len();
    if tensors.len() != 2 * n {
        return Err(Error::CheckpointFormat(format!(
            "advbatch: {} tensors for {} labels",
            tensors.len(),
            n
        )));
    }
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let original = tensors[2 * i].clone();
        let perturbed = tensors[2 * i + 1].clone();
        examples.push(AdvExample::measure(
            spec,
            params,
            original,
            perturbed,
            labels[i],
            0,
            AttackStatus::Ok,
        )?);
    }
    Ok((attack_label, examples))
}
