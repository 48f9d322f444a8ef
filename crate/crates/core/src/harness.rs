//! End-to-end evaluation: run attack suites over a test subsample, apply
//! detection to clean and adversarial inputs, compute the table metrics, and
//! emit machine-readable reports. Also drives the epsilon and
//! false-positive sweep studies.

use crate::attacks::{run_attack, AdvExample, AttackSpec};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::finetune::{finetune_with_snapshots, FinetuneConfig};
use crate::model::{forward_with_cache, ModelSpec, Parameters};
use crate::taboo::{check_activations, CertificationResult, TabooKey};
use crate::tensor::argmax;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Crate version plus an optional build tag, stamped into every report.
pub fn version_string() -> String {
    match option_env!("GIT_DESCRIBE") {
        Some(desc) => format!("{} ({desc})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Output format for reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidParameter {
                name: "format",
                detail: format!("expected json|csv, got '{other}'"),
            }),
        }
    }
}

/// Evaluation metrics for one attack configuration (or the no-attack row,
/// where the adversarial columns are empty).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    pub clean_accuracy: f32,
    pub false_positive_rate: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversarial_accuracy: Option<f32>,
    /// Headline detection rate: flagged fraction of successfully
    /// misclassified adversarial inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_rate: Option<f32>,
    /// Secondary: flagged fraction of all attacked inputs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detection_rate_all: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_l2: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_linf: Option<f32>,
    pub attacked: usize,
    pub successful: usize,
}

/// Full evaluation output: config echo, version, per-attack rows, optional
/// certification margins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionReport {
    pub version: String,
    pub config: serde_json::Value,
    pub n_evaluated: usize,
    pub rows: Vec<AttackRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certification: Option<CertificationResult>,
}

/// Evaluation options shared by the CLI and the test harness.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Seeded subsample size over the test set (0 is invalid).
    pub subsample: usize,
    pub seed: u64,
    /// Alarm policy: minimum offending masked neurons for a malicious verdict.
    pub min_hits: usize,
    /// Free-form config echo carried into the report.
    pub config_echo: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            subsample: 1000,
            seed: 0,
            min_hits: 1,
            config_echo: serde_json::Value::Null,
        }
    }
}

struct CleanStats {
    accuracy: f32,
    false_positive_rate: f32,
}

fn clean_pass(
    spec: &ModelSpec,
    params: &Parameters,
    key: Option<&TabooKey>,
    dataset: &Dataset,
    indices: &[usize],
    min_hits: usize,
) -> Result<CleanStats> {
    let outcomes: Vec<(bool, bool)> = indices
        .par_iter()
        .map(|&i| {
            let pass = forward_with_cache(spec, params, &dataset.image(i))?;
            let correct = argmax(&pass.logits) == dataset.label(i);
            let flagged = key
                .map(|k| check_activations(k, &pass.activations, min_hits).is_malicious())
                .unwrap_or(false);
            Ok((correct, flagged))
        })
        .collect::<Result<_>>()?;
    let n = indices.len().max(1) as f32;
    let correct = outcomes.iter().filter(|(c, _)| *c).count() as f32;
    let flagged = outcomes.iter().filter(|(_, f)| *f).count() as f32;
    Ok(CleanStats { accuracy: correct / n, false_positive_rate: flagged / n })
}

/// Generate adversarial examples for one attack over the given indices.
pub fn attack_subsample(
    spec: &ModelSpec,
    params: &Parameters,
    dataset: &Dataset,
    indices: &[usize],
    attack: &AttackSpec,
) -> Result<Vec<AdvExample>> {
    indices
        .par_iter()
        .map(|&i| run_attack(spec, params, &dataset.image(i), dataset.label(i), attack, i as u64))
        .collect()
}

/// Metrics for a set of adversarial examples against a keyed model.
pub fn score_examples(
    spec: &ModelSpec,
    params: &Parameters,
    key: Option<&TabooKey>,
    examples: &[AdvExample],
    min_hits: usize,
    label: &str,
    clean: &CleanStats,
) -> Result<AttackRow> {
    let scored: Vec<(bool, bool)> = examples
        .par_iter()
        .map(|ex| {
            let pass = forward_with_cache(spec, params, &ex.perturbed)?;
            let correct = argmax(&pass.logits) == ex.original_label;
            let flagged = key
                .map(|k| check_activations(k, &pass.activations, min_hits).is_malicious())
                .unwrap_or(false);
            Ok((correct, flagged))
        })
        .collect::<Result<_>>()?;
    let n = examples.len().max(1) as f32;
    let adv_correct = scored.iter().filter(|(c, _)| *c).count() as f32;
    let successful: Vec<usize> = scored
        .iter()
        .enumerate()
        .filter_map(|(i, (correct, _))| (!correct).then_some(i))
        .collect();
    let flagged_all = scored.iter().filter(|(_, f)| *f).count() as f32;
    let flagged_successful =
        successful.iter().filter(|&&i| scored[i].1).count() as f32;

    let (mean_l2, mean_linf) = if successful.is_empty() {
        (None, None)
    } else {
        let l2: f64 = successful.iter().map(|&i| examples[i].l2 as f64).sum();
        let linf: f64 = successful.iter().map(|&i| examples[i].linf as f64).sum();
        let k = successful.len() as f64;
        (Some((l2 / k) as f32), Some((linf / k) as f32))
    };

    Ok(AttackRow {
        attack: label.to_string(),
        clean_accuracy: clean.accuracy,
        false_positive_rate: clean.false_positive_rate,
        adversarial_accuracy: Some(adv_correct / n),
        detection_rate: (!successful.is_empty())
            .then(|| flagged_successful / successful.len() as f32),
        detection_rate_all: Some(flagged_all / n),
        mean_l2,
        mean_linf,
        attacked: examples.len(),
        successful: successful.len(),
    })
}

/// Evaluate a keyed (or baseline, with `key = None`) model: a no-attack row
/// plus one row per configured attack, over a seeded test subsample.
pub fn run_evaluation(
    spec: &ModelSpec,
    params: &Parameters,
    key: Option<&TabooKey>,
    test_set: &Dataset,
    attacks: &[AttackSpec],
    prebuilt: &[(String, Vec<AdvExample>)],
    certification: Option<CertificationResult>,
    opts: &EvalOptions,
) -> Result<DetectionReport> {
    if opts.subsample == 0 {
        return Err(Error::InvalidParameter {
            name: "subsample",
            detail: "evaluation subsample must be positive".into(),
        });
    }
    let indices = test_set.subsample_indices(opts.subsample, opts.seed);
    let clean = clean_pass(spec, params, key, test_set, &indices, opts.min_hits)?;

    let mut rows = vec![AttackRow {
        attack: "no_attack".into(),
        clean_accuracy: clean.accuracy,
        false_positive_rate: clean.false_positive_rate,
        adversarial_accuracy: None,
        detection_rate: None,
        detection_rate_all: None,
        mean_l2: None,
        mean_linf: None,
        attacked: 0,
        successful: 0,
    }];

    for attack in attacks {
        let examples = attack_subsample(spec, params, test_set, &indices, attack)?;
        rows.push(score_examples(
            spec,
            params,
            key,
            &examples,
            opts.min_hits,
            &attack.label(),
            &clean,
        )?);
    }
    for (label, examples) in prebuilt {
        rows.push(score_examples(spec, params, key, examples, opts.min_hits, label, &clean)?);
    }

    Ok(DetectionReport {
        version: version_string(),
        config: opts.config_echo.clone(),
        n_evaluated: indices.len(),
        rows,
        certification,
    })
}

/// One grid point of a sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    /// Value of the swept variable (epsilon, or achieved false-positive
    /// rate for the FP sweep).
    pub value: f32,
    pub epsilon: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub snapshot_epoch: Option<usize>,
    pub attack: String,
    pub clean_accuracy: f32,
    pub adversarial_accuracy: f32,
    pub detection_rate: f32,
    pub false_positive_rate: f32,
    pub converged: bool,
}

/// Sweep output with config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: String,
    pub variable: String,
    pub config: serde_json::Value,
    pub rows: Vec<SweepRow>,
}

fn eval_rows_for_sweep(
    spec: &ModelSpec,
    params: &Parameters,
    key: &TabooKey,
    test_set: &Dataset,
    attacks: &[AttackSpec],
    opts: &EvalOptions,
    value: f32,
    epsilon: f32,
    snapshot_epoch: Option<usize>,
    converged: bool,
) -> Result<Vec<SweepRow>> {
    let report = run_evaluation(spec, params, Some(key), test_set, attacks, &[], None, opts)?;
    let clean = &report.rows[0];
    Ok(report
        .rows
        .iter()
        .skip(1)
        .map(|row| SweepRow {
            value,
            epsilon,
            snapshot_epoch,
            attack: row.attack.clone(),
            clean_accuracy: clean.clean_accuracy,
            adversarial_accuracy: row.adversarial_accuracy.unwrap_or(0.0),
            detection_rate: row.detection_rate.unwrap_or(0.0),
            false_positive_rate: row.false_positive_rate,
            converged,
        })
        .collect())
}

/// Fine-tune one model per epsilon grid point from a shared baseline and
/// evaluate a fixed attack set on each. Non-converged runs keep their row,
/// flagged.
#[allow(clippy::too_many_arguments)]
pub fn run_epsilon_sweep(
    spec: &ModelSpec,
    baseline: &Parameters,
    key: &TabooKey,
    train_set: &Dataset,
    test_set: &Dataset,
    grid: &[f32],
    template: &FinetuneConfig,
    attacks: &[AttackSpec],
    opts: &EvalOptions,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter { name: "grid", detail: "sweep grid is empty".into() });
    }
    let mut rows = Vec::new();
    for &eps in grid {
        let config = FinetuneConfig { epsilon: eps, ..*template };
        let (outcome, _) = finetune_with_snapshots(spec, baseline, key, train_set, &config, &[])?;
        rows.extend(eval_rows_for_sweep(
            spec,
            &outcome.params,
            key,
            test_set,
            attacks,
            opts,
            eps,
            eps,
            None,
            outcome.converged,
        )?);
    }
    Ok(SweepReport {
        version: version_string(),
        variable: "epsilon".into(),
        config: opts.config_echo.clone(),
        rows,
    })
}

/// Snapshot one fine-tuning run at several epochs (reaching different
/// false-positive rates) and evaluate each snapshot; rows are keyed by the
/// achieved FP rate.
#[allow(clippy::too_many_arguments)]
pub fn run_false_positive_sweep(
    spec: &ModelSpec,
    baseline: &Parameters,
    key: &TabooKey,
    train_set: &Dataset,
    test_set: &Dataset,
    snapshot_epochs: &[usize],
    template: &FinetuneConfig,
    attacks: &[AttackSpec],
    opts: &EvalOptions,
) -> Result<SweepReport> {
    if snapshot_epochs.is_empty() {
        return Err(Error::InvalidParameter {
            name: "grid",
            detail: "no snapshot epochs given".into(),
        });
    }
    let (outcome, snapshots) =
        finetune_with_snapshots(spec, baseline, key, train_set, template, snapshot_epochs)?;
    let mut rows = Vec::new();
    for (epoch, params) in &snapshots {
        let mut snapshot_rows = eval_rows_for_sweep(
            spec,
            params,
            key,
            test_set,
            attacks,
            opts,
            0.0,
            template.epsilon,
            Some(*epoch),
            outcome.converged,
        )?;
        for row in &mut snapshot_rows {
            row.value = row.false_positive_rate;
        }
        rows.extend(snapshot_rows);
    }
    Ok(SweepReport {
        version: version_string(),
        variable: "false_positive".into(),
        config: opts.config_echo.clone(),
        rows,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    f.write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn fmt_opt(v: Option<f32>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Serialize a detection report as JSON or plot-ready CSV.
pub fn emit_report(report: &DetectionReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report)
                .map_err(|e| Error::CheckpointFormat(format!("report encode: {e}")))?;
            write_text(path, &text)
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "attack,clean_accuracy,false_positive_rate,adversarial_accuracy,detection_rate,detection_rate_all,mean_l2,mean_linf,attacked,successful\n",
            );
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{:.4},{:.4},{},{},{},{},{},{},{}\n",
                    r.attack,
                    r.clean_accuracy,
                    r.false_positive_rate,
                    fmt_opt(r.adversarial_accuracy),
                    fmt_opt(r.detection_rate),
                    fmt_opt(r.detection_rate_all),
                    fmt_opt(r.mean_l2),
                    fmt_opt(r.mean_linf),
                    r.attacked,
                    r.successful,
                ));
            }
            write_text(path, &out)
        }
    }
}

/// Serialize a sweep report as JSON or plot-ready CSV.
pub fn emit_sweep_report(report: &SweepReport, format: ReportFormat, path: &Path) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report)
                .map_err(|e| Error::CheckpointFormat(format!("report encode: {e}")))?;
            write_text(path, &text)
        }
        ReportFormat::Csv => {
            let mut out = String::from(
                "value,epsilon,snapshot_epoch,attack,clean_accuracy,adversarial_accuracy,detection_rate,false_positive_rate,converged\n",
            );
            for r in &report.rows {
                out.push_str(&format!(
                    "{:.6},{:.6},{},{},{:.4},{:.4},{:.4},{:.4},{}\n",
                    r.value,
                    r.epsilon,
                    r.snapshot_epoch.map(|e| e.to_string()).unwrap_or_default(),
                    r.attack,
                    r.clean_accuracy,
                    r.adversarial_accuracy,
                    r.detection_rate,
                    r.false_positive_rate,
                    r.converged,
                ));
            }
            write_text(path, &out)
        }
    }
}

/// Parse a sweep grid expression: `lo:hi:logN` (log-spaced) or `lo:hi:linN`.
pub fn parse_grid(expr: &str) -> Result<Vec<f32>> {
    let parts: Vec<&str> = expr.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidParameter {
            name: "grid",
            detail: format!("expected lo:hi:logN or lo:hi:linN, got '{expr}'"),
        });
    }
    let lo: f32 = parts[0].parse().map_err(|_| Error::InvalidParameter {
        name: "grid",
        detail: format!("bad lower bound '{}'", parts[0]),
    })?;
    let hi: f32 = parts[1].parse().map_err(|_| Error::InvalidParameter {
        name: "grid",
        detail: format!("bad upper bound '{}'", parts[1]),
    })?;
    let (log, n): (bool, usize) = if let Some(n) = parts[2].strip_prefix("log") {
        (true, n.parse().map_err(|_| Error::InvalidParameter {
            name: "grid",
            detail: format!("bad point count '{}'", parts[2]),
        })?)
    } else if let Some(n) = parts[2].strip_prefix("lin") {
        (false, n.parse().map_err(|_| Error::InvalidParameter {
            name: "grid",
            detail: format!("bad point count '{}'", parts[2]),
        })?)
    } else {
        return Err(Error::InvalidParameter {
            name: "grid",
            detail: format!("spacing must be logN or linN, got '{}'", parts[2]),
        });
    };
    if n < 2 || lo <= 0.0 && log || hi <= lo {
        return Err(Error::InvalidParameter {
            name: "grid",
            detail: format!("need hi > lo (> 0 for log) and n >= 2, got '{expr}'"),
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f32 / (n - 1) as f32;
        let v = if log {
            (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        } else {
            lo + t * (hi - lo)
        };
        out.push(v);
    }
    Ok(out)
}
