//! Group Relative Policy Optimization over the low-rank adapters.
//!
//! Each step snapshots the current parameters as the old policy, samples a
//! group of trajectories per case under that snapshot, turns rewards into
//! group-relative advantages and takes `policy_epochs` ascent steps on the
//! clipped, KL-regularized surrogate
//!
//! ```text
//! J = mean over groups of (1/G)·Σ_j [ min(ρ_j·Â_j, clip(ρ_j, 1−ε, 1+ε)·Â_j) − β·KL_j ]
//! ```
//!
//! with `ρ_j = exp(log π_θ(o_j) − log π_old(o_j))` over the whole trajectory
//! and `KL_j = (1/T_j)·Σ_t (log π_old(o_t) − log π_θ(o_t))`, the per-token
//! sampled estimator averaged over the trajectory.

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Narrative;
use crate::data::{CaseRecord, Decision, PromptMode, Serializer};
use crate::policy::{Caps, ParamGrad, PolicyError, PolicyParams, PolicyView, Trajectory, WeightGrad};
use crate::seed;
use crate::textmetrics::{tone_metrics, Lexicon, ToneMetrics};
use crate::vocab::Vocab;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("invalid grpo config: {0}")]
    Config(String),
    #[error("stage precondition failed: {0}")]
    Precondition(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("no cases to train on")]
    NoCases,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub lr: f64,
    /// Groups (cases) per update; the old policy is refreshed at each boundary.
    pub accumulation: usize,
    pub temperature: f64,
    pub steps: usize,
    /// Ascent steps taken on each sampled batch before the old policy is refreshed.
    pub policy_epochs: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.02,
            lr: 0.1,
            accumulation: 8,
            temperature: 1.0,
            steps: 100,
            policy_epochs: 2,
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: String| Err(GrpoError::Config(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !self.kl_beta.is_finite() || self.kl_beta < 0.0 {
            return bad(format!("kl_beta must be finite and non-negative, got {}", self.kl_beta));
        }
        if !self.lr.is_finite() {
            return bad(format!("lr must be finite, got {}", self.lr));
        }
        if self.accumulation == 0 || self.policy_epochs == 0 {
            return bad("accumulation and policy_epochs must be at least 1".into());
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return bad(format!("temperature must be finite and non-negative, got {}", self.temperature));
        }
        Ok(())
    }
}

/// Samples `group_size` independent trajectories under the old snapshot.
pub fn rollout_group(
    view_old: &PolicyView<'_>,
    narrative: &Narrative,
    cfg: &GrpoConfig,
    caps: &Caps,
    seed: u64,
) -> Result<Vec<Trajectory>, GrpoError> {
    if cfg.group_size < 2 {
        return Err(GrpoError::Config(format!("group_size must be at least 2, got {}", cfg.group_size)));
    }
    Ok((0..cfg.group_size)
        .map(|j| view_old.sample_seeded(narrative, cfg.temperature, caps, seed::derive(seed, &[j as u64])))
        .collect())
}

pub fn correctness_reward(traj: &Trajectory, label: Decision) -> f64 {
    if traj.prediction() == label {
        1.0
    } else {
        0.0
    }
}

/// Tone metrics of the explanation segment, `None` when it has no words.
pub fn explanation_tone(traj: &Trajectory, vocab: &Vocab, lexicon: &Lexicon) -> Option<ToneMetrics> {
    tone_metrics(&vocab.render(traj.explanation()), lexicon).ok()
}

/// `r_read + r_polite` on the explanation; an empty explanation earns 0.
pub fn tone_reward(traj: &Trajectory, vocab: &Vocab, lexicon: &Lexicon) -> f64 {
    match explanation_tone(traj, vocab, lexicon) {
        Some(m) => m.reward(),
        None => {
            warn!("empty explanation receives zero tone reward");
            0.0
        }
    }
}

/// Group mean and rewards minus that mean.
pub fn advantages(rewards: &[f64]) -> Result<(f64, Vec<f64>), GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::Config(format!("a group needs at least 2 rewards, got {}", rewards.len())));
    }
    let baseline = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok((baseline, rewards.iter().map(|r| r - baseline).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub case_id: u64,
    pub narrative: Narrative,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub baseline: f64,
    pub advantages: Vec<f64>,
}

impl GroupBatch {
    pub fn new(
        case_id: u64,
        narrative: Narrative,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
    ) -> Result<Self, GrpoError> {
        if trajectories.len() != rewards.len() {
            return Err(GrpoError::Invariant("one reward per trajectory".into()));
        }
        let (baseline, advantages) = advantages(&rewards)?;
        let batch = GroupBatch { case_id, narrative, trajectories, rewards, baseline, advantages };
        batch.check()?;
        Ok(batch)
    }

    /// Zero-sum advantages.
    pub fn check(&self) -> Result<(), GrpoError> {
        let sum: f64 = self.advantages.iter().sum();
        let tol = 1e-9 * self.advantages.len() as f64;
        if sum.abs() > tol {
            return Err(GrpoError::Invariant(format!("advantages of case {} sum to {sum}", self.case_id)));
        }
        Ok(())
    }

    /// All rewards equal, so every advantage is zero.
    pub fn is_degenerate(&self) -> bool {
        self.advantages.iter().all(|&a| a == 0.0)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurrogateOut {
    pub objective: f64,
    /// Mean KL estimate over the scored trajectories.
    pub kl: f64,
    pub grad: ParamGrad,
    /// Trajectory ratios per group, `NaN` for dropped ones.
    pub ratios: Vec<Vec<f64>>,
    pub clipped: usize,
    pub dropped: usize,
    pub degenerate: usize,
}

fn clip(rho: f64, eps: f64) -> f64 {
    rho.clamp(1.0 - eps, 1.0 + eps)
}

struct GroupTerms {
    objective: f64,
    kl_sum: f64,
    scored: usize,
    grad: Option<WeightGrad>,
    ratios: Vec<f64>,
    clipped: usize,
    dropped: usize,
}

fn group_terms(
    view: &PolicyView<'_>,
    params: &PolicyParams,
    batch: &GroupBatch,
    cfg: &GrpoConfig,
    with_grad: bool,
) -> Result<GroupTerms, GrpoError> {
    let degenerate = batch.is_degenerate();
    let mut t = GroupTerms {
        objective: 0.0,
        kl_sum: 0.0,
        scored: 0,
        grad: (with_grad && !degenerate).then(|| WeightGrad::zeros(params)),
        ratios: Vec::with_capacity(batch.trajectories.len()),
        clipped: 0,
        dropped: 0,
    };
    let mut kept = Vec::with_capacity(batch.trajectories.len());
    for (traj, &adv) in batch.trajectories.iter().zip(&batch.advantages) {
        let new_lp: f64 = view.token_logprobs(&batch.narrative, traj, cfg.temperature).iter().sum();
        let old_lp = traj.logprob();
        let rho = (new_lp - old_lp).exp();
        if !rho.is_finite() || !new_lp.is_finite() || !old_lp.is_finite() {
            t.dropped += 1;
            t.ratios.push(f64::NAN);
            continue;
        }
        t.ratios.push(rho);
        let len = traj.tokens.len().max(1) as f64;
        let kl = (old_lp - new_lp) / len;
        t.kl_sum += kl;
        t.scored += 1;
        kept.push((traj, adv, rho, kl, len));
    }
    if kept.is_empty() || degenerate {
        return Ok(t);
    }
    let g = kept.len() as f64;
    for (traj, adv, rho, kl, len) in kept {
        let unclipped = rho * adv;
        let clipped = clip(rho, cfg.clip_eps) * adv;
        let through_ratio = unclipped <= clipped;
        if !through_ratio {
            t.clipped += 1;
        }
        t.objective += (unclipped.min(clipped) - cfg.kl_beta * kl) / g;
        if let Some(grad) = t.grad.as_mut() {
            // the clipped branch is constant in θ
            let mut w = cfg.kl_beta / len;
            if through_ratio {
                w += rho * adv;
            }
            if w != 0.0 && cfg.temperature > 0.0 {
                grad.add_trajectory(view, &batch.narrative, traj, cfg.temperature, w / g)?;
            }
        }
    }
    Ok(t)
}

/// Surrogate value and its gradient over the trainable deltas, averaged over
/// the groups in `batches`. Degenerate groups add nothing to either and are
/// counted; trajectories with a non-finite ratio are dropped and counted.
pub fn surrogate_and_grad(
    params: &PolicyParams,
    vocab: &Vocab,
    batches: &[GroupBatch],
    cfg: &GrpoConfig,
    with_grad: bool,
) -> Result<SurrogateOut, GrpoError> {
    let view = params.view(vocab)?;
    let parts: Vec<GroupTerms> =
        batches.par_iter().map(|b| group_terms(&view, params, b, cfg, with_grad)).collect::<Result<_, _>>()?;
    let n = batches.len().max(1) as f64;
    let mut out = SurrogateOut::default();
    let mut total = with_grad.then(|| WeightGrad::zeros(params));
    let mut kl_sum = 0.0;
    let mut scored = 0;
    for (b, p) in batches.iter().zip(parts) {
        out.objective += p.objective / n;
        kl_sum += p.kl_sum;
        scored += p.scored;
        out.clipped += p.clipped;
        out.dropped += p.dropped;
        out.degenerate += usize::from(b.is_degenerate());
        out.ratios.push(p.ratios);
        if let (Some(t), Some(g)) = (total.as_mut(), p.grad) {
            t.0.scaled_add(1.0 / n, &g.0);
        }
    }
    out.kl = if scored > 0 { kl_sum / scored as f64 } else { 0.0 };
    if let Some(t) = total {
        out.grad = ParamGrad::chain(params, &t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Correctness,
    Tone,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Correctness => 1,
            Stage::Tone => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub stage: u8,
    pub mean_reward: f64,
    /// Surrogate at the updated parameters against this step's old snapshot.
    pub objective: f64,
    pub kl: f64,
    pub mean_fk: f64,
    pub mean_density: f64,
    /// Fraction of sampled predictions that match the label.
    pub accuracy_probe: f64,
    pub degenerate_groups: usize,
    pub clipped: usize,
    pub dropped: usize,
}

/// Everything a stage needs besides parameters, cases and config.
#[derive(Debug, Clone, Copy)]
pub struct StageEnv<'a> {
    pub vocab: &'a Vocab,
    pub serializer: &'a Serializer<'a>,
    pub caps: &'a Caps,
    pub lexicon: &'a Lexicon,
}

fn stage1_ready(p: &PolicyParams) -> Result<(), GrpoError> {
    let ok = p.active.acc && p.trainable.acc && !p.active.tone && !p.trainable.tone && !p.trainable.base;
    if ok {
        Ok(())
    } else {
        Err(GrpoError::Precondition(format!(
            "stage 1 needs ACC active and trainable, TONE inactive, base frozen; found active {:?}, trainable {:?}",
            p.active, p.trainable
        )))
    }
}

fn stage2_ready(p: &PolicyParams) -> Result<(), GrpoError> {
    let ok = p.active.acc && !p.trainable.acc && p.active.tone && p.trainable.tone && !p.trainable.base;
    if ok {
        Ok(())
    } else {
        Err(GrpoError::Precondition(format!(
            "stage 2 needs ACC active and frozen, TONE active and trainable, base frozen; found active {:?}, trainable {:?}",
            p.active, p.trainable
        )))
    }
}

/// Stage 1: correctness reward on the ACC adapter, alternating audiences.
pub fn run_stage1(
    params: &PolicyParams,
    env: &StageEnv<'_>,
    cases: &[&CaseRecord],
    cfg: &GrpoConfig,
) -> Result<(PolicyParams, Vec<StepMetrics>), GrpoError> {
    stage1_ready(params)?;
    run_stage(params, env, cases, cfg, Stage::Correctness)
}

/// Stage 2: tone reward on the TONE adapter, consumer audience only.
pub fn run_stage2(
    params: &PolicyParams,
    env: &StageEnv<'_>,
    cases: &[&CaseRecord],
    cfg: &GrpoConfig,
) -> Result<(PolicyParams, Vec<StepMetrics>), GrpoError> {
    stage2_ready(params)?;
    run_stage(params, env, cases, cfg, Stage::Tone)
}

fn mode_for(stage: Stage, visit: usize, n_cases: usize) -> PromptMode {
    match stage {
        Stage::Tone => PromptMode::Consumer,
        // alternate per visit; with an even split the pairing swaps on every pass
        Stage::Correctness => {
            let pass_shift = if n_cases.is_multiple_of(2) { visit / n_cases } else { 0 };
            if (visit + pass_shift).is_multiple_of(2) {
                PromptMode::Expert
            } else {
                PromptMode::Consumer
            }
        }
    }
}

fn run_stage(
    params: &PolicyParams,
    env: &StageEnv<'_>,
    cases: &[&CaseRecord],
    cfg: &GrpoConfig,
    stage: Stage,
) -> Result<(PolicyParams, Vec<StepMetrics>), GrpoError> {
    cfg.validate()?;
    env.caps.validate()?;
    if cases.is_empty() {
        return Err(GrpoError::NoCases);
    }
    let mut params = params.clone();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let old = params.clone();
        let view_old = old.view(env.vocab)?;
        let slots: Vec<usize> = (0..cfg.accumulation).map(|k| step * cfg.accumulation + k).collect();
        let rolled: Vec<(GroupBatch, Vec<Option<ToneMetrics>>)> = slots
            .par_iter()
            .map(|&visit| {
                let case = cases[visit % cases.len()];
                let mode = mode_for(stage, visit, cases.len());
                let narrative = env.serializer.narrative(case, mode);
                let group_seed = seed::derive(cfg.seed, &[step as u64, visit as u64]);
                let trajs = rollout_group(&view_old, &narrative, cfg, env.caps, group_seed)?;
                let tones: Vec<Option<ToneMetrics>> =
                    trajs.iter().map(|t| explanation_tone(t, env.vocab, env.lexicon)).collect();
                let rewards: Vec<f64> = match stage {
                    Stage::Correctness => trajs.iter().map(|t| correctness_reward(t, case.label)).collect(),
                    Stage::Tone => trajs.iter().map(|t| tone_reward(t, env.vocab, env.lexicon)).collect(),
                };
                Ok((GroupBatch::new(case.id, narrative, trajs, rewards)?, tones))
            })
            .collect::<Result<_, GrpoError>>()?;

        let mut tone_sum = (0.0, 0.0, 0usize);
        let mut reward_sum = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut batches = Vec::with_capacity(rolled.len());
        for (visit, (batch, tones)) in slots.iter().zip(rolled) {
            let label = cases[visit % cases.len()].label;
            reward_sum += batch.rewards.iter().sum::<f64>();
            correct += batch.trajectories.iter().filter(|t| t.prediction() == label).count();
            total += batch.trajectories.len();
            for m in tones.into_iter().flatten() {
                tone_sum.0 += m.fk_grade;
                tone_sum.1 += m.politeness_density;
                tone_sum.2 += 1;
            }
            batches.push(batch);
        }

        let mut clipped = 0;
        let mut dropped = 0;
        let mut degenerate = 0;
        for epoch in 0..cfg.policy_epochs {
            let out = surrogate_and_grad(&params, env.vocab, &batches, cfg, true)?;
            if epoch == 0 {
                degenerate = out.degenerate;
            }
            clipped += out.clipped;
            dropped += out.dropped;
            out.grad.apply(&mut params, cfg.lr);
        }
        let after = surrogate_and_grad(&params, env.vocab, &batches, cfg, false)?;

        let tone_n = tone_sum.2.max(1) as f64;
        let m = StepMetrics {
            step,
            stage: stage.number(),
            mean_reward: reward_sum / total as f64,
            objective: after.objective,
            kl: after.kl,
            mean_fk: tone_sum.0 / tone_n,
            mean_density: tone_sum.1 / tone_n,
            accuracy_probe: correct as f64 / total as f64,
            degenerate_groups: degenerate,
            clipped,
            dropped,
        };
        debug!(
            "stage {} step {step}: reward {:.3} objective {:.4} kl {:.5} fk {:.2} density {:.3} probe {:.3}",
            m.stage, m.mean_reward, m.objective, m.kl, m.mean_fk, m.mean_density, m.accuracy_probe
        );
        log.push(m);
    }
    if let Some(last) = log.last() {
        info!("stage {} finished after {} steps, last mean reward {:.3}", stage.number(), cfg.steps, last.mean_reward);
    }
    Ok((params, log))
}
