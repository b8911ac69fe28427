use serde::{Deserialize, Serialize};

use super::{CaseRecord, FeatureSchema, PromptMode};
use crate::vocab::{TokenId, Vocab, CONSUMER, EXPERT, SEP};

/// Token form of a case: `<mode> name₁ value₁ … nameₖ valueₖ <SEP>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub tokens: Vec<TokenId>,
    pub source_case: u64,
    pub prompt_mode: PromptMode,
}

/// Template serializer. Each value is replaced by its feature-specific
/// magnitude bucket token, so the vocabulary stays closed and distinct bucket
/// profiles give distinct narratives.
#[derive(Debug, Clone, Copy)]
pub struct Serializer<'a> {
    schema: &'a FeatureSchema,
    vocab: &'a Vocab,
}

impl<'a> Serializer<'a> {
    pub fn new(schema: &'a FeatureSchema, vocab: &'a Vocab) -> Self {
        assert_eq!(schema.dims(), vocab.feature_dims(), "schema and vocabulary disagree");
        Serializer { schema, vocab }
    }

    pub fn schema(&self) -> &'a FeatureSchema {
        self.schema
    }

    pub fn vocab(&self) -> &'a Vocab {
        self.vocab
    }

    /// Length of every narrative this serializer produces.
    pub fn narrative_len(&self) -> usize {
        2 * self.schema.dims() + 2
    }

    /// Returns the narrative and the number of values clamped into the
    /// boundary buckets.
    pub fn serialize(&self, case: &CaseRecord, mode: PromptMode) -> (Narrative, usize) {
        let mut tokens = Vec::with_capacity(self.narrative_len());
        tokens.push(match mode {
            PromptMode::Expert => EXPERT,
            PromptMode::Consumer => CONSUMER,
        });
        let mut clamped = 0;
        for (j, (spec, &x)) in self.schema.features.iter().zip(&case.features).enumerate() {
            let (bucket, was_clamped) = spec.bucket(x);
            clamped += was_clamped as usize;
            tokens.push(self.vocab.feature_name(j));
            tokens.push(self.vocab.feature_value(j, bucket));
        }
        tokens.push(SEP);
        (Narrative { tokens, source_case: case.id, prompt_mode: mode }, clamped)
    }

    pub fn narrative(&self, case: &CaseRecord, mode: PromptMode) -> Narrative {
        self.serialize(case, mode).0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Decision;
    use crate::vocab::BUCKETS;
    use proptest::prelude::*;

    fn setup() -> (FeatureSchema, Vocab) {
        let schema = FeatureSchema::default();
        let vocab = Vocab::for_schema(&schema);
        (schema, vocab)
    }

    #[test]
    fn all_zero_case_uses_lowest_buckets() {
        let (schema, vocab) = setup();
        let ser = Serializer::new(&schema, &vocab);
        let case = CaseRecord { id: 1, features: vec![0.0; 8], label: Decision::Deny };
        let (n, clamped) = ser.serialize(&case, PromptMode::Expert);
        assert_eq!(n.tokens[0], EXPERT);
        for j in 0..8 {
            assert_eq!(n.tokens[1 + 2 * j], vocab.feature_name(j));
            assert_eq!(n.tokens[2 + 2 * j], vocab.feature_value(j, 0));
        }
        assert_eq!(*n.tokens.last().unwrap(), SEP);
        // employment_years starts at 0, every other field's range is above zero
        assert_eq!(clamped, 7);
    }

    #[test]
    fn one_bucket_change_changes_one_token() {
        let (schema, vocab) = setup();
        let ser = Serializer::new(&schema, &vocab);
        let mid: Vec<f64> = schema.features.iter().map(|f| f.mean()).collect();
        let a = CaseRecord { id: 1, features: mid.clone(), label: Decision::Approve };
        let mut b = a.clone();
        b.features[0] = schema.features[0].hi;
        let (na, _) = ser.serialize(&a, PromptMode::Consumer);
        let (nb, _) = ser.serialize(&b, PromptMode::Consumer);
        let diffs: Vec<usize> = (0..na.tokens.len()).filter(|&i| na.tokens[i] != nb.tokens[i]).collect();
        assert_eq!(diffs, vec![2]);
        assert_eq!(na, ser.serialize(&a, PromptMode::Consumer).0);
    }

    proptest! {
        #[test]
        fn injective_on_bucket_profiles(
            p in proptest::collection::vec(0usize..BUCKETS, 8),
            q in proptest::collection::vec(0usize..BUCKETS, 8),
        ) {
            let (schema, vocab) = setup();
            let ser = Serializer::new(&schema, &vocab);
            let centre = |profile: &[usize]| -> Vec<f64> {
                schema.features.iter().zip(profile).map(|(f, &b)| {
                    let w = (f.hi - f.lo) / BUCKETS as f64;
                    f.lo + w * (b as f64 + 0.5)
                }).collect()
            };
            let a = CaseRecord { id: 0, features: centre(&p), label: Decision::Deny };
            let b = CaseRecord { id: 0, features: centre(&q), label: Decision::Deny };
            let same = ser.narrative(&a, PromptMode::Expert) == ser.narrative(&b, PromptMode::Expert);
            prop_assert_eq!(same, p == q);
        }
    }
}
