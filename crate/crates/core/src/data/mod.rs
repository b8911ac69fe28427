//! Loan-like decision cases: schema, synthetic generation, CSV ingestion,
//! narrative serialization and stage splits.

mod csv_load;
mod schema;
mod serialize;
mod split;

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub use csv_load::{load_csv, CsvLoad, LABEL_COLUMN};
pub use schema::{FeatureSchema, FeatureSpec, LabelRule};
pub use serialize::{Narrative, Serializer};
pub use split::{balance_and_split, id_hash, SplitSizes, StageSplits};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("noise must lie in [0, 0.5], got {0}")]
    Noise(f64),
    #[error("need at least one case")]
    Empty,
    #[error("feature dimension must be between 1 and {max}, got {got}")]
    Dims { got: usize, max: usize },
    #[error("schema error: column {column:?} {reason}")]
    Schema { column: String, reason: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("case {id}: {message}")]
    Invalid { id: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Binary decision. Approve maps to 1, Deny to 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Decision {
    Deny,
    Approve,
}

impl Decision {
    pub fn as_u8(self) -> u8 {
        match self {
            Decision::Deny => 0,
            Decision::Approve => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Decision::Deny => Decision::Approve,
            Decision::Approve => Decision::Deny,
        }
    }
}

impl From<Decision> for u8 {
    fn from(d: Decision) -> u8 {
        d.as_u8()
    }
}

impl TryFrom<u8> for Decision {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            0 => Ok(Decision::Deny),
            1 => Ok(Decision::Approve),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::Deny => "DENY",
            Decision::Approve => "APPROVE",
        })
    }
}

/// Audience the response is written for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Expert,
    Consumer,
}

impl PromptMode {
    pub const BOTH: [PromptMode; 2] = [PromptMode::Expert, PromptMode::Consumer];
}

impl std::fmt::Display for PromptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PromptMode::Expert => "expert",
            PromptMode::Consumer => "consumer",
        })
    }
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "expert" => Ok(PromptMode::Expert),
            "consumer" => Ok(PromptMode::Consumer),
            _ => Err(format!("unknown prompt mode {s:?} (expected expert or consumer)")),
        }
    }
}

/// One decision instance. `features` follows the order of the schema it was built with.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: Decision,
}

impl CaseRecord {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<(), DataError> {
        if self.features.len() != schema.dims() {
            return Err(DataError::Invalid {
                id: self.id,
                message: format!("expected {} features, got {}", schema.dims(), self.features.len()),
            });
        }
        if let Some(j) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(DataError::Invalid {
                id: self.id,
                message: format!("feature {} is not finite", schema.features[j].name),
            });
        }
        Ok(())
    }
}

/// Draws `n` cases uniformly over each feature's range and labels them with
/// the schema's linear rule, flipping each label with probability `noise`.
///
/// The flip coin is drawn for every case regardless of `noise`, so two calls
/// with the same seed share features and differ only in flipped labels.
pub fn generate_synthetic(
    schema: &FeatureSchema,
    n: usize,
    seed: u64,
    noise: f64,
) -> Result<Vec<CaseRecord>, DataError> {
    if n == 0 {
        return Err(DataError::Empty);
    }
    if !(0.0..=0.5).contains(&noise) {
        return Err(DataError::Noise(noise));
    }
    let rule = schema.rule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = (0..n)
        .map(|i| {
            let features: Vec<f64> =
                schema.features.iter().map(|f| f.lo + (f.hi - f.lo) * rng.random::<f64>()).collect();
            let flip = rng.random::<f64>() < noise;
            let clean = rule.decide(&features);
            CaseRecord { id: i as u64, features, label: if flip { clean.flipped() } else { clean } }
        })
        .collect();
    Ok(cases)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseLine {
    id: u64,
    features: BTreeMap<String, f64>,
    label: Decision,
}

/// Writes one JSON object per line: `id`, `features` (name → value), `label`.
pub fn write_jsonl<W: Write>(mut out: W, schema: &FeatureSchema, cases: &[CaseRecord]) -> Result<(), DataError> {
    for c in cases {
        let line = CaseLine {
            id: c.id,
            features: schema.features.iter().zip(&c.features).map(|(f, v)| (f.name.clone(), *v)).collect(),
            label: c.label,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R, schema: &FeatureSchema) -> Result<Vec<CaseRecord>, DataError> {
    let mut cases = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: CaseLine =
            serde_json::from_str(&line).map_err(|e| DataError::Row { line: i as u64 + 1, message: e.to_string() })?;
        let case = CaseRecord {
            id: parsed.id,
            features: schema
                .order_features(&parsed.features)
                .map_err(|message| DataError::Row { line: i as u64 + 1, message })?,
            label: parsed.label,
        };
        case.validate(schema)?;
        cases.push(case);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_labels_follow_rule() {
        let schema = FeatureSchema::default();
        let rule = schema.rule();
        let cases = generate_synthetic(&schema, 4, 7, 0.0).unwrap();
        assert_eq!(cases.len(), 4);
        for c in &cases {
            assert_eq!(c.label, rule.decide(&c.features));
            c.validate(&schema).unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let schema = FeatureSchema::default();
        let dump = |cases: &[CaseRecord]| {
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &schema, cases).unwrap();
            buf
        };
        let a = generate_synthetic(&schema, 1000, 1, 0.0).unwrap();
        let b = generate_synthetic(&schema, 1000, 1, 0.0).unwrap();
        assert_eq!(dump(&a), dump(&b));
    }

    #[test]
    fn flip_rate_matches_noise() {
        let schema = FeatureSchema::default();
        let clean = generate_synthetic(&schema, 10_000, 3, 0.0).unwrap();
        let noisy = generate_synthetic(&schema, 10_000, 3, 0.1).unwrap();
        let flips = clean.iter().zip(&noisy).filter(|(a, b)| a.label != b.label).count();
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.10).abs() <= 0.01, "flip rate {rate}");
    }

    #[test]
    fn rejects_bad_noise_and_empty() {
        let schema = FeatureSchema::default();
        assert!(matches!(generate_synthetic(&schema, 10, 0, 0.6), Err(DataError::Noise(_))));
        assert!(matches!(generate_synthetic(&schema, 0, 0, 0.0), Err(DataError::Empty)));
    }

    #[test]
    fn approval_rate_is_about_three_quarters() {
        let schema = FeatureSchema::default();
        let cases = generate_synthetic(&schema, 20_000, 11, 0.0).unwrap();
        let rate = cases.iter().filter(|c| c.label == Decision::Approve).count() as f64 / 20_000.0;
        assert!((rate - 0.75).abs() < 0.02, "approval rate {rate}");
    }

    #[test]
    fn jsonl_round_trip() {
        let schema = FeatureSchema::default();
        let cases = generate_synthetic(&schema, 25, 5, 0.2).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &schema, &cases).unwrap();
        let back = read_jsonl(std::io::Cursor::new(buf), &schema).unwrap();
        assert_eq!(cases, back);
    }

    #[test]
    fn decision_serializes_as_integer() {
        assert_eq!(serde_json::to_string(&Decision::Approve).unwrap(), "1");
        assert_eq!(serde_json::from_str::<Decision>("0").unwrap(), Decision::Deny);
        assert!(serde_json::from_str::<Decision>("3").is_err());
    }
}
