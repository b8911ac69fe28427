//! Reflection-augmented supervised fine-tuning.
//!
//! A rule-aware teacher writes an explanation and a decision for every case
//! and audience. With probability `fallibility` its decision is wrong; such
//! responses get exactly one reflection pass that regenerates the response
//! with the correct decision. The policy then learns the targets by
//! token-level cross-entropy. The prompt is masked and the reasoning segment
//! is sampled from the current policy without supervision.

use std::io::Write;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{CaseRecord, Decision, FeatureSchema, Narrative, PromptMode, Serializer};
use crate::policy::{draw, Caps, ParamGrad, PolicyError, PolicyParams, PolicyView, WeightGrad};
use crate::seed;
use crate::vocab::{Phase, TokenId, Vocab, APPROVE, DENY, END_EXPLAIN, END_REASON};

#[derive(Debug, Error)]
pub enum SftError {
    #[error("fallibility must lie in [0, 1), got {0}")]
    Fallibility(f64),
    #[error("reflection requested for case {0} whose prior decision is already correct")]
    NothingToReflect(u64),
    #[error("sft precondition failed: {0}")]
    Precondition(String),
    #[error("non-finite loss in epoch {epoch} at batch {batch}: {loss}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeacherResponse {
    pub explanation: Vec<TokenId>,
    pub decision: Decision,
}

/// Phrasing choices for consumer explanations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Opener {
    None,
    Thanks,
    Hello,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Closer {
    None,
    Please,
    Appreciate,
}

#[derive(Debug, Clone, Copy)]
struct Style {
    opener: Opener,
    plain_body: bool,
    closer: Closer,
}

impl Style {
    fn draw(rng: &mut impl Rng) -> Self {
        let opener = match rng.random_range(0..4) {
            0 => Opener::Thanks,
            1 => Opener::Hello,
            _ => Opener::None,
        };
        let plain_body = rng.random_bool(0.4);
        let closer = match rng.random_range(0..4) {
            0 => Closer::Please,
            1 => Closer::Appreciate,
            _ => Closer::None,
        };
        Style { opener, plain_body, closer }
    }
}

/// Stand-in for a strong reference model: it knows each case's label and the
/// labeling rule's weights, and explains through the two features that
/// contribute most to the rule score.
#[derive(Debug, Clone, Copy)]
pub struct Teacher<'a> {
    schema: &'a FeatureSchema,
    vocab: &'a Vocab,
}

impl<'a> Teacher<'a> {
    pub fn new(schema: &'a FeatureSchema, vocab: &'a Vocab) -> Self {
        Teacher { schema, vocab }
    }

    /// Features ordered by absolute rule contribution, largest first.
    pub fn salient_features(&self, case: &CaseRecord) -> Vec<(usize, f64)> {
        let mut c: Vec<(usize, f64)> = self.schema.contributions(&case.features).into_iter().enumerate().collect();
        c.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
        c
    }

    fn compose(&self, case: &CaseRecord, mode: PromptMode, style: Style) -> Vec<TokenId> {
        let v = self.vocab;
        let w = |s: &str| v.word(s);
        let top: Vec<(TokenId, bool)> = self
            .salient_features(case)
            .into_iter()
            .take(2)
            .map(|(j, _)| (v.feature_name(j), self.schema.features[j].standardize(case.features[j]) > 0.0))
            .collect();
        let formal = |above: bool| w(if above { "elevated" } else { "diminished" });
        let plain = |above: bool| w(if above { "high" } else { "low" });

        let mut out = Vec::new();
        match mode {
            PromptMode::Expert => {
                out.extend([w("the"), w("applicant"), w("demonstrates")]);
                for (k, &(name, above)) in top.iter().enumerate() {
                    if k > 0 {
                        out.push(w("and"));
                    }
                    out.extend([formal(above), name]);
                }
                out.push(v.period());
            }
            PromptMode::Consumer => {
                match style.opener {
                    Opener::Thanks => {
                        out.extend([w("thank"), w("you"), w("for"), w("your"), w("application"), v.period()])
                    }
                    Opener::Hello => out.extend([w("hello"), v.period()]),
                    Opener::None => {}
                }
                if style.plain_body {
                    for (k, &(name, above)) in top.iter().enumerate() {
                        if k > 0 {
                            out.push(w("and"));
                        }
                        out.extend([w("your"), name, w("is"), plain(above)]);
                    }
                } else {
                    out.extend([w("your"), w("application"), w("indicates")]);
                    for (k, &(name, above)) in top.iter().enumerate() {
                        if k > 0 {
                            out.push(w("and"));
                        }
                        out.extend([formal(above), name]);
                    }
                }
                out.push(v.period());
                match style.closer {
                    Closer::Please => out.extend([w("please"), w("call"), w("us"), v.period()]),
                    Closer::Appreciate => out.extend([w("we"), w("appreciate"), w("you"), v.period()]),
                    Closer::None => {}
                }
            }
        }
        out
    }

    /// First-pass response. With probability `fallibility` the decision is
    /// the opposite of the case label.
    pub fn generate(
        &self,
        case: &CaseRecord,
        mode: PromptMode,
        fallibility: f64,
        seed: u64,
    ) -> Result<TeacherResponse, SftError> {
        if !(0.0..1.0).contains(&fallibility) {
            return Err(SftError::Fallibility(fallibility));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let style = Style::draw(&mut rng);
        let wrong = rng.random::<f64>() < fallibility;
        Ok(TeacherResponse {
            explanation: self.compose(case, mode, style),
            decision: if wrong { case.label.flipped() } else { case.label },
        })
    }

    /// Single reflection pass after a wrong decision. The regenerated
    /// response carries the correct decision and reads like a first answer.
    pub fn reflect(
        &self,
        case: &CaseRecord,
        mode: PromptMode,
        prior: &TeacherResponse,
    ) -> Result<TeacherResponse, SftError> {
        if prior.decision == case.label {
            return Err(SftError::NothingToReflect(case.id));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(case.id, &[mode as u64, 0x7265_666c]));
        let style = Style::draw(&mut rng);
        Ok(TeacherResponse { explanation: self.compose(case, mode, style), decision: case.label })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub narrative: Narrative,
    pub target_explanation: Vec<TokenId>,
    pub target_decision: Decision,
    pub reflected: bool,
}

impl SftExample {
    /// Supervised tokens: explanation, END_EXPLAIN, decision.
    pub fn target_tokens(&self) -> Vec<TokenId> {
        let mut t = self.target_explanation.clone();
        t.push(END_EXPLAIN);
        t.push(decision_token(self.target_decision));
        t
    }
}

pub fn decision_token(d: Decision) -> TokenId {
    match d {
        Decision::Approve => APPROVE,
        Decision::Deny => DENY,
    }
}

/// Builds one example per (case, audience). Every final target carries the
/// case label; `reflected` marks the ones that needed the reflection pass.
pub fn build_sft_dataset(
    teacher: &Teacher<'_>,
    serializer: &Serializer<'_>,
    cases: &[&CaseRecord],
    fallibility: f64,
    seed: u64,
) -> Result<Vec<SftExample>, SftError> {
    let jobs: Vec<(usize, &CaseRecord, PromptMode)> =
        cases.iter().enumerate().flat_map(|(i, c)| PromptMode::BOTH.into_iter().map(move |m| (i, *c, m))).collect();
    jobs.par_iter()
        .map(|&(i, case, mode)| {
            let first = teacher.generate(case, mode, fallibility, seed::derive(seed, &[i as u64, mode as u64]))?;
            let (response, reflected) = if first.decision != case.label {
                (teacher.reflect(case, mode, &first)?, true)
            } else {
                (first, false)
            };
            Ok(SftExample {
                narrative: serializer.narrative(case, mode),
                target_explanation: response.explanation,
                target_decision: response.decision,
                reflected,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct SftLine<'a> {
    narrative_tokens: &'a [TokenId],
    target_tokens: Vec<TokenId>,
    decision: Decision,
    reflected: bool,
}

pub fn write_sft_jsonl<W: Write>(mut out: W, examples: &[SftExample]) -> Result<(), SftError> {
    for ex in examples {
        let line = SftLine {
            narrative_tokens: &ex.narrative.tokens,
            target_tokens: ex.target_tokens(),
            decision: ex.target_decision,
            reflected: ex.reflected,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Examples per parameter update.
    pub accumulation: usize,
    pub fallibility: f64,
    /// Temperature for the unsupervised reasoning segment.
    pub reasoning_temperature: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { epochs: 3, lr: 0.5, accumulation: 8, fallibility: 0.3, reasoning_temperature: 1.0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean cross-entropy per target token, one entry per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Samples a reasoning segment, stopping at END_REASON or the cap.
fn sample_reasoning(
    view: &PolicyView<'_>,
    narrative: &Narrative,
    cap: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Vec<TokenId> {
    let allowed = view.vocab().allowed(Phase::Reasoning);
    let mut out = Vec::with_capacity(cap);
    for _ in 0..cap {
        let ctx = view.context(narrative, &out, Phase::Reasoning);
        let lp = view.phase_logprobs(&ctx, Phase::Reasoning, temperature);
        let pick = if temperature == 0.0 {
            lp.iter().position(|&l| l == 0.0).expect("one-hot has a mode")
        } else {
            draw(&lp, rng)
        };
        out.push(allowed[pick]);
        if allowed[pick] == END_REASON {
            break;
        }
    }
    out
}

/// Summed negative log-likelihood of the targets and its gradient (as
/// ascent direction on the log-likelihood).
fn example_grad(
    view: &PolicyView<'_>,
    params: &PolicyParams,
    ex: &SftExample,
    caps: &Caps,
    temperature: f64,
    seed: u64,
) -> Result<(f64, usize, WeightGrad), SftError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prefix = sample_reasoning(view, &ex.narrative, caps.reasoning, temperature, &mut rng);
    let mut targets = ex.target_tokens();
    let keep = caps.explanation.min(targets.len() - 2);
    targets.drain(keep..targets.len() - 2);

    let mut grad = WeightGrad::zeros(params);
    let mut nll = 0.0;
    let n = targets.len();
    for (k, &tok) in targets.iter().enumerate() {
        let phase = if k + 1 == n { Phase::Prediction } else { Phase::Explanation };
        let ctx = view.context(&ex.narrative, &prefix, phase);
        let lp = view.phase_logprobs(&ctx, phase, 1.0);
        let idx = view
            .vocab()
            .allowed(phase)
            .binary_search(&tok)
            .map_err(|_| PolicyError::Trajectory(format!("target token {} is not allowed in {phase:?}", tok.0)))?;
        nll -= lp[idx];
        grad.add_token(view, &ex.narrative, &prefix, phase, tok, 1.0, 1.0)?;
        prefix.push(tok);
    }
    Ok((nll, n, grad))
}

/// Trains the base matrix on the examples and freezes it afterwards.
pub fn sft_train(
    params: &PolicyParams,
    vocab: &Vocab,
    examples: &[SftExample],
    cfg: &SftConfig,
    caps: &Caps,
) -> Result<(PolicyParams, SftReport), SftError> {
    if !params.trainable.base {
        return Err(SftError::Precondition("base weights must be trainable".into()));
    }
    if params.active.acc || params.active.tone {
        return Err(SftError::Precondition("adapters must be inactive during SFT".into()));
    }
    if cfg.accumulation == 0 {
        return Err(SftError::Precondition("accumulation must be at least 1".into()));
    }
    caps.validate()?;

    let mut params = params.clone();
    let mut report = SftReport { epoch_loss: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &[epoch as u64])));
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;
        for (batch, chunk) in order.chunks(cfg.accumulation).enumerate() {
            let view = params.view(vocab)?;
            let parts: Vec<(f64, usize, WeightGrad)> = chunk
                .par_iter()
                .map(|&i| {
                    let s = seed::derive(cfg.seed, &[epoch as u64, i as u64, 1]);
                    example_grad(&view, &params, &examples[i], caps, cfg.reasoning_temperature, s)
                })
                .collect::<Result<_, _>>()?;
            let mut total = WeightGrad::zeros(&params);
            let mut nll = 0.0;
            let mut tokens = 0;
            for (l, n, g) in parts {
                nll += l;
                tokens += n;
                total.0 += &g.0;
            }
            if !nll.is_finite() {
                return Err(SftError::NonFiniteLoss { epoch, batch, loss: nll });
            }
            epoch_nll += nll;
            epoch_tokens += tokens;
            if cfg.lr != 0.0 {
                let mut g = ParamGrad::chain(&params, &total);
                g.scale(1.0 / tokens as f64);
                g.apply(&mut params, cfg.lr);
            }
        }
        let mean = epoch_nll / epoch_tokens.max(1) as f64;
        debug!("sft epoch {epoch}: mean cross-entropy {mean:.4}");
        report.epoch_loss.push(mean);
    }
    if let Some(last) = report.epoch_loss.last() {
        info!("sft finished: {} epochs, final cross-entropy {last:.4}", cfg.epochs);
    }
    params.trainable.base = false;
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::vocab::TokenKind;

    struct Fx {
        schema: FeatureSchema,
        vocab: Vocab,
        cases: Vec<CaseRecord>,
    }

    fn fx(n: usize) -> Fx {
        let schema = FeatureSchema::default();
        let vocab = Vocab::for_schema(&schema);
        let cases = generate_synthetic(&schema, n, 21, 0.0).unwrap();
        Fx { schema, vocab, cases }
    }

    #[test]
    fn infallible_teacher_is_always_right() {
        let f = fx(300);
        let t = Teacher::new(&f.schema, &f.vocab);
        for (i, c) in f.cases.iter().enumerate() {
            for m in PromptMode::BOTH {
                let r = t.generate(c, m, 0.0, i as u64).unwrap();
                assert_eq!(r.decision, c.label);
                let names =
                    r.explanation.iter().filter(|&&tok| matches!(f.vocab.info(tok).kind, TokenKind::FeatureName(_)));
                assert!(names.count() >= 1);
            }
        }
    }

    #[test]
    fn fallible_teacher_flip_rate() {
        let f = fx(10_000);
        let t = Teacher::new(&f.schema, &f.vocab);
        let wrong = f
            .cases
            .iter()
            .enumerate()
            .filter(|(i, c)| t.generate(c, PromptMode::Expert, 0.3, *i as u64).unwrap().decision != c.label)
            .count();
        let rate = wrong as f64 / 10_000.0;
        assert!((rate - 0.30).abs() <= 0.02, "flip rate {rate}");
    }

    #[test]
    fn reflection_fixes_and_leaves_no_trace() {
        let f = fx(50);
        let t = Teacher::new(&f.schema, &f.vocab);
        for c in &f.cases {
            let prior = TeacherResponse { explanation: vec![], decision: c.label.flipped() };
            let fixed = t.reflect(c, PromptMode::Consumer, &prior).unwrap();
            assert_eq!(fixed.decision, c.label);
            assert!(fixed.explanation.iter().all(|&tok| f.vocab.info(tok).kind != TokenKind::Control));
            let correct = TeacherResponse { explanation: vec![], decision: c.label };
            assert!(matches!(t.reflect(c, PromptMode::Consumer, &correct), Err(SftError::NothingToReflect(_))));
        }
    }

    #[test]
    fn dataset_targets_always_match_labels() {
        let f = fx(2500);
        let t = Teacher::new(&f.schema, &f.vocab);
        let ser = Serializer::new(&f.schema, &f.vocab);
        let refs: Vec<&CaseRecord> = f.cases.iter().collect();
        let ds = build_sft_dataset(&t, &ser, &refs, 0.3, 5).unwrap();
        assert_eq!(ds.len(), 5000);
        let by_id: std::collections::HashMap<u64, Decision> = f.cases.iter().map(|c| (c.id, c.label)).collect();
        assert!(ds.iter().all(|e| e.target_decision == by_id[&e.narrative.source_case]));
        let rate = ds.iter().filter(|e| e.reflected).count() as f64 / ds.len() as f64;
        assert!((rate - 0.3).abs() <= 0.03, "reflected rate {rate}");
        let caps = Caps::default();
        assert!(ds.iter().all(|e| e.target_explanation.len() < caps.explanation));
    }

    #[test]
    fn rejects_bad_fallibility() {
        let f = fx(1);
        let t = Teacher::new(&f.schema, &f.vocab);
        assert!(matches!(t.generate(&f.cases[0], PromptMode::Expert, 1.0, 0), Err(SftError::Fallibility(_))));
    }

    fn small_set(f: &Fx, n: usize) -> Vec<SftExample> {
        let t = Teacher::new(&f.schema, &f.vocab);
        let ser = Serializer::new(&f.schema, &f.vocab);
        let refs: Vec<&CaseRecord> = f.cases.iter().take(n).collect();
        build_sft_dataset(&t, &ser, &refs, 0.3, 1).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let f = fx(20);
        let ex = small_set(&f, 20);
        let p = PolicyParams::new_raw(&f.vocab, 4, 8, 0.02, 3);
        let cfg = SftConfig { lr: 0.0, epochs: 2, ..Default::default() };
        let (q, report) = sft_train(&p, &f.vocab, &ex, &cfg, &Caps::default()).unwrap();
        assert_eq!(q.base, p.base);
        assert_eq!(report.epoch_loss.len(), 2);
        assert!(!q.trainable.base);
    }

    #[test]
    fn overfits_one_example() {
        let f = fx(4);
        for ex in small_set(&f, 4) {
            let p = PolicyParams::new_raw(&f.vocab, 4, 8, 0.02, 3);
            let cfg = SftConfig { epochs: 200, accumulation: 1, lr: 2.0, ..Default::default() };
            let (_, report) = sft_train(&p, &f.vocab, &[ex], &cfg, &Caps::default()).unwrap();
            let last = *report.epoch_loss.last().unwrap();
            assert!(last < 0.1, "final cross-entropy {last}");
        }
    }

    #[test]
    fn adapters_stay_zero_and_preconditions_hold() {
        let f = fx(10);
        let ex = small_set(&f, 10);
        let p = PolicyParams::new_raw(&f.vocab, 4, 8, 0.02, 3);
        let (q, _) = sft_train(&p, &f.vocab, &ex, &SftConfig::default(), &Caps::default()).unwrap();
        assert!(q.acc.is_zero() && q.tone.is_zero());
        assert!(matches!(
            sft_train(&q, &f.vocab, &ex, &SftConfig::default(), &Caps::default()),
            Err(SftError::Precondition(_))
        ));
        let mut r = p.clone();
        r.attach_acc(0.1, 1);
        r.trainable.base = true;
        assert!(matches!(
            sft_train(&r, &f.vocab, &ex, &SftConfig::default(), &Caps::default()),
            Err(SftError::Precondition(_))
        ));
    }

    #[test]
    fn jsonl_dump_has_expected_fields() {
        let f = fx(2);
        let ex = small_set(&f, 2);
        let mut buf = Vec::new();
        write_sft_jsonl(&mut buf, &ex).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(std::str::from_utf8(&buf).unwrap().lines().next().unwrap()).unwrap();
        for key in ["narrative_tokens", "target_tokens", "decision", "reflected"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
    }
}
