//! Decision metrics, tone distributions, a logistic-regression baseline and
//! the four-checkpoint ablation.

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{id_hash, CaseRecord, Decision, PromptMode, Serializer};
use crate::policy::{Caps, PolicyError, PolicyParams, Trajectory};
use crate::textmetrics::{tone_metrics, Lexicon};
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("nothing to evaluate")]
    Empty,
    #[error("logistic regression diverged at iteration {0}")]
    Diverged(usize),
    #[error("test split hash {found} differs from the expected {expected}")]
    SplitMismatch { expected: String, found: String },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Approve is the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub checkpoint: String,
    pub prompt_mode: Option<PromptMode>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub confusion: Confusion,
    /// Set when precision, recall or F1 had a zero denominator and is reported as 0.
    pub degenerate: bool,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn classification_metrics(predictions: &[Decision], labels: &[Decision]) -> Result<MetricsReport, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch { predictions: predictions.len(), labels: labels.len() });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut c = Confusion::default();
    for (p, l) in predictions.iter().zip(labels) {
        match (p, l) {
            (Decision::Approve, Decision::Approve) => c.tp += 1,
            (Decision::Approve, Decision::Deny) => c.fp += 1,
            (Decision::Deny, Decision::Deny) => c.tn += 1,
            (Decision::Deny, Decision::Approve) => c.fn_ += 1,
        }
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_).filter(|_| c.tp > 0);
    Ok(MetricsReport {
        checkpoint: String::new(),
        prompt_mode: None,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        precision: precision.unwrap_or(0.0),
        recall: recall.unwrap_or(0.0),
        f1: f1.unwrap_or(0.0),
        confusion: c,
        degenerate: precision.is_none() || recall.is_none() || f1.is_none(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToneMetricName {
    FkGrade,
    PolitenessDensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub metric: ToneMetricName,
    pub count: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std_dev: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
}

impl DistributionStats {
    pub fn from_values(metric: ToneMetricName, values: &[f64]) -> Result<Self, EvalError> {
        if values.is_empty() {
            return Err(EvalError::Empty);
        }
        let n = values.len();
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        // shifted by the minimum so identical values give an exact mean and zero spread
        let lo = sorted[0];
        let mean = lo + values.iter().map(|v| v - lo).sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
        Ok(DistributionStats {
            metric,
            count: n,
            mean,
            std_dev: var.sqrt(),
            min: sorted[0],
            max: sorted[n - 1],
            median,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaseTone {
    pub case_id: u64,
    pub fk_grade: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneReport {
    pub fk: DistributionStats,
    pub density: DistributionStats,
    /// Explanations without any word; left out of both distributions.
    pub empty: usize,
    pub per_case: Vec<CaseTone>,
}

/// Read-only evaluation context shared by every checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct EvalEnv<'a> {
    pub vocab: &'a Vocab,
    pub serializer: &'a Serializer<'a>,
    pub caps: &'a Caps,
    pub lexicon: &'a Lexicon,
}

/// Greedy trajectories for every case, in case order.
pub fn greedy_rollouts(
    params: &PolicyParams,
    env: &EvalEnv<'_>,
    cases: &[&CaseRecord],
    mode: PromptMode,
) -> Result<Vec<Trajectory>, EvalError> {
    env.caps.validate()?;
    let view = params.view(env.vocab)?;
    Ok(cases.par_iter().map(|c| view.greedy(&env.serializer.narrative(c, mode), env.caps)).collect())
}

fn tone_from_rollouts(env: &EvalEnv<'_>, cases: &[&CaseRecord], trajs: &[Trajectory]) -> Result<ToneReport, EvalError> {
    let mut per_case = Vec::with_capacity(cases.len());
    let mut empty = 0;
    for (c, t) in cases.iter().zip(trajs) {
        match tone_metrics(&env.vocab.render(t.explanation()), env.lexicon) {
            Ok(m) => per_case.push(CaseTone { case_id: c.id, fk_grade: m.fk_grade, density: m.politeness_density }),
            Err(_) => empty += 1,
        }
    }
    let fk: Vec<f64> = per_case.iter().map(|c| c.fk_grade).collect();
    let density: Vec<f64> = per_case.iter().map(|c| c.density).collect();
    Ok(ToneReport {
        fk: DistributionStats::from_values(ToneMetricName::FkGrade, &fk)?,
        density: DistributionStats::from_values(ToneMetricName::PolitenessDensity, &density)?,
        empty,
        per_case,
    })
}

/// Readability and politeness of greedy consumer explanations.
pub fn tone_distributions(
    params: &PolicyParams,
    env: &EvalEnv<'_>,
    cases: &[&CaseRecord],
) -> Result<ToneReport, EvalError> {
    let trajs = greedy_rollouts(params, env, cases, PromptMode::Consumer)?;
    tone_from_rollouts(env, cases, &trajs)
}

/// Greedy decision metrics for one checkpoint and audience.
pub fn evaluate_checkpoint(
    name: &str,
    params: &PolicyParams,
    env: &EvalEnv<'_>,
    cases: &[&CaseRecord],
    mode: PromptMode,
) -> Result<MetricsReport, EvalError> {
    let trajs = greedy_rollouts(params, env, cases, mode)?;
    report_from_rollouts(name, mode, cases, &trajs)
}

fn report_from_rollouts(
    name: &str,
    mode: PromptMode,
    cases: &[&CaseRecord],
    trajs: &[Trajectory],
) -> Result<MetricsReport, EvalError> {
    let preds: Vec<Decision> = trajs.iter().map(Trajectory::prediction).collect();
    let labels: Vec<Decision> = cases.iter().map(|c| c.label).collect();
    let mut r = classification_metrics(&preds, &labels)?;
    r.checkpoint = name.to_string();
    r.prompt_mode = Some(mode);
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTone {
    pub checkpoint: String,
    pub tone: ToneReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub test_hash: String,
    /// One row per (checkpoint, audience), checkpoints in input order, expert first.
    pub rows: Vec<MetricsReport>,
    /// Consumer-mode tone distributions per checkpoint.
    pub tone: Vec<CheckpointTone>,
}

impl AblationReport {
    pub fn row(&self, checkpoint: &str, mode: PromptMode) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint && r.prompt_mode == Some(mode))
    }

    pub fn tone_of(&self, checkpoint: &str) -> Option<&ToneReport> {
        self.tone.iter().find(|t| t.checkpoint == checkpoint).map(|t| &t.tone)
    }
}

/// Evaluates every checkpoint under both audiences on the same test split.
pub fn ablation_run(
    checkpoints: &[(&str, &PolicyParams)],
    env: &EvalEnv<'_>,
    test: &[&CaseRecord],
    expected_test_hash: Option<&str>,
) -> Result<AblationReport, EvalError> {
    let ids: Vec<u64> = test.iter().map(|c| c.id).collect();
    let test_hash = id_hash(&ids);
    if let Some(expected) = expected_test_hash {
        if expected != test_hash {
            return Err(EvalError::SplitMismatch { expected: expected.to_string(), found: test_hash });
        }
    }
    for (_, p) in checkpoints {
        p.check_vocab(env.vocab)?;
    }
    let mut rows = Vec::with_capacity(checkpoints.len() * 2);
    let mut tone = Vec::with_capacity(checkpoints.len());
    for &(name, params) in checkpoints {
        for mode in PromptMode::BOTH {
            let trajs = greedy_rollouts(params, env, test, mode)?;
            let r = report_from_rollouts(name, mode, test, &trajs)?;
            info!("{name} {mode}: accuracy {:.3} f1 {:.3}", r.accuracy, r.f1);
            rows.push(r);
            if mode == PromptMode::Consumer {
                tone.push(CheckpointTone {
                    checkpoint: name.to_string(),
                    tone: tone_from_rollouts(env, test, &trajs)?,
                });
            }
        }
    }
    Ok(AblationReport { test_hash, rows, tone })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    fn standardized(&self, x: &[f64]) -> impl Iterator<Item = f64> + '_ {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        z.into_iter()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        let s: f64 = self.standardized(x).zip(&self.weights).map(|(z, w)| z * w).sum::<f64>() + self.bias;
        1.0 / (1.0 + (-s).exp())
    }

    pub fn predict(&self, x: &[f64]) -> Decision {
        if self.probability(x) >= 0.5 {
            Decision::Approve
        } else {
            Decision::Deny
        }
    }
}

/// Full-batch gradient descent on the mean log loss with an L2 penalty
/// `l2·‖w‖²/2` (bias unpenalized), features standardized on `train`.
pub fn fit_logistic(train: &[&CaseRecord], lr: f64, iters: usize, l2: f64) -> Result<LogisticModel, EvalError> {
    let first = train.first().ok_or(EvalError::Empty)?;
    let d = first.features.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|c| c.features[j]).sum::<f64>() / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|c| (c.features[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut model = LogisticModel { mean, scale, weights: vec![0.0; d], bias: 0.0 };
    let z: Vec<Vec<f64>> = train.iter().map(|c| model.standardized(&c.features).collect()).collect();
    let y: Vec<f64> = train.iter().map(|c| f64::from(c.label.as_u8())).collect();
    for it in 0..iters {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        let mut loss = 0.0;
        for (zi, &yi) in z.iter().zip(&y) {
            let s: f64 = zi.iter().zip(&model.weights).map(|(a, b)| a * b).sum::<f64>() + model.bias;
            let p = 1.0 / (1.0 + (-s).exp());
            // log(1 + e^s) − y·s, stable for large |s|
            loss += s.max(0.0) + (-s.abs()).exp().ln_1p() - yi * s;
            for (g, zj) in gw.iter_mut().zip(zi) {
                *g += (p - yi) * zj;
            }
            gb += p - yi;
        }
        loss /= n;
        loss += 0.5 * l2 * model.weights.iter().map(|w| w * w).sum::<f64>();
        if !loss.is_finite() {
            return Err(EvalError::Diverged(it));
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= lr * (g / n + l2 * *w);
        }
        model.bias -= lr * gb / n;
        if model.weights.iter().any(|w| !w.is_finite()) || !model.bias.is_finite() {
            return Err(EvalError::Diverged(it));
        }
    }
    Ok(model)
}

pub fn logistic_baseline(
    train: &[&CaseRecord],
    test: &[&CaseRecord],
    lr: f64,
    iters: usize,
    l2: f64,
) -> Result<MetricsReport, EvalError> {
    let model = fit_logistic(train, lr, iters, l2)?;
    let preds: Vec<Decision> = test.iter().map(|c| model.predict(&c.features)).collect();
    let labels: Vec<Decision> = test.iter().map(|c| c.label).collect();
    let mut r = classification_metrics(&preds, &labels)?;
    r.checkpoint = "logistic".to_string();
    Ok(r)
}
