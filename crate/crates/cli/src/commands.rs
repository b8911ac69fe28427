use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use lexma_core::data::{CaseRecord, Decision, FeatureSchema, PromptMode, Serializer};
use lexma_core::policy::{load_checkpoint, Caps};
use lexma_core::textmetrics::{tone_metrics, Lexicon, ToneMetrics};
use lexma_core::vocab::Vocab;
use log::warn;
use serde::Deserialize;

/// A case to explain; the label is optional and ignored.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseInput {
    #[serde(default)]
    id: u64,
    features: BTreeMap<String, f64>,
    #[serde(default)]
    #[allow(dead_code)]
    label: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub decision: Decision,
    pub text: String,
    pub tone: Option<ToneMetrics>,
}

impl Explanation {
    pub fn render(&self, mode: PromptMode) -> String {
        let mut out = format!("decision: {}\nexplanation: {}\n", self.decision, self.text);
        if mode == PromptMode::Consumer {
            match &self.tone {
                Some(t) => {
                    out.push_str(&format!("fk_grade: {:.3}\ndensity: {:.3}\n", t.fk_grade, t.politeness_density))
                }
                None => out.push_str("fk_grade: n/a\ndensity: n/a\n"),
            }
        }
        out
    }
}

/// Greedy decision and explanation for one case under a checkpoint.
pub fn explain(checkpoint: &Path, case_json: &str, mode: PromptMode, caps: &Caps) -> Result<Explanation> {
    let (params, _) = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let schema = FeatureSchema::with_dims(params.dims.feature_dims)?;
    let vocab = Vocab::for_schema(&schema);
    params.check_vocab(&vocab)?;
    let input: CaseInput = serde_json::from_str(case_json).context("case must be a JSON object with `features`")?;
    let features = schema.order_features(&input.features).map_err(anyhow::Error::msg)?;
    let case = CaseRecord { id: input.id, features, label: Decision::Deny };
    let narrative = Serializer::new(&schema, &vocab).narrative(&case, mode);
    caps.validate()?;
    let traj = params.view(&vocab)?.greedy(&narrative, caps);
    let text = vocab.render(traj.explanation());
    let tone = tone_metrics(&text, &Lexicon::default()).ok();
    Ok(Explanation { decision: traj.prediction(), text, tone })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineScore {
    pub line: usize,
    pub metrics: ToneMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub lines: Vec<LineScore>,
    pub mean_fk: f64,
    pub mean_density: f64,
    pub mean_r_read: f64,
    pub mean_r_polite: f64,
}

impl ScoreReport {
    pub fn render(&self) -> String {
        let mut out = String::from("line,fk_grade,density,r_read,r_polite\n");
        for l in &self.lines {
            let m = l.metrics;
            out.push_str(&format!("{},{},{},{},{}\n", l.line, m.fk_grade, m.politeness_density, m.r_read, m.r_polite));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            self.mean_fk, self.mean_density, self.mean_r_read, self.mean_r_polite
        ));
        out
    }
}

/// Tone metrics per non-empty line plus their means.
pub fn score_text(text: &str, lexicon: &Lexicon) -> Result<ScoreReport> {
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            warn!("line {} is empty, skipped", i + 1);
            continue;
        }
        match tone_metrics(line, lexicon) {
            Ok(metrics) => lines.push(LineScore { line: i + 1, metrics }),
            Err(e) => warn!("line {} skipped: {e}", i + 1),
        }
    }
    if lines.is_empty() {
        bail!("no scorable lines");
    }
    let n = lines.len() as f64;
    let mean = |f: fn(&ToneMetrics) -> f64| lines.iter().map(|l| f(&l.metrics)).sum::<f64>() / n;
    Ok(ScoreReport {
        mean_fk: mean(|m| m.fk_grade),
        mean_density: mean(|m| m.politeness_density),
        mean_r_read: mean(|m| m.r_read),
        mean_r_polite: mean(|m| m.r_polite),
        lines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scores_lines_and_skips_blanks() {
        let r = score_text("Thank you. Please call.\n\n   \nThe loan is good.\n", &Lexicon::default()).unwrap();
        assert_eq!(r.lines.len(), 2);
        assert_eq!(r.lines[0].line, 1);
        assert_eq!(r.lines[1].line, 4);
        // "thank you" and "please" cover 3 of 4 words
        assert_eq!(r.lines[0].metrics.politeness_density, 0.75);
        let fk = (r.lines[0].metrics.fk_grade + r.lines[1].metrics.fk_grade) / 2.0;
        assert_eq!(r.mean_fk, fk);
        assert!(r.render().starts_with("line,fk_grade,density,r_read,r_polite\n1,"));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(score_text("", &Lexicon::default()).is_err());
        assert!(score_text("\n  \n", &Lexicon::default()).is_err());
    }
}
