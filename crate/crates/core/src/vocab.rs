//! Closed token vocabulary shared by the serializer, the policy and the tone scorer.
//!
//! Layout is fixed: seven control tokens first, then the sentence terminator and
//! the explanation/reasoning words, then one name token per feature, then
//! [`BUCKETS`] value tokens per feature. Every token renders to a surface string
//! so generated explanations can be scored as plain text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::FeatureSchema;

/// Number of magnitude buckets per feature.
pub const BUCKETS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub const EXPERT: TokenId = TokenId(0);
pub const CONSUMER: TokenId = TokenId(1);
pub const SEP: TokenId = TokenId(2);
pub const END_REASON: TokenId = TokenId(3);
pub const END_EXPLAIN: TokenId = TokenId(4);
pub const APPROVE: TokenId = TokenId(5);
pub const DENY: TokenId = TokenId(6);

const CONTROL: [&str; 7] = ["<EXPERT>", "<CONSUMER>", "<SEP>", "<END_REASON>", "<END_EXPLAIN>", "<APPROVE>", "<DENY>"];

const PERIOD: &str = ".";

/// Words usable in explanations. `high` and `low` double as reasoning words.
const EXPLANATION_WORDS: &[&str] = &[
    // plain
    "your",
    "is",
    "high",
    "low",
    "and",
    "the",
    "we",
    "us",
    "it",
    "for",
    "call",
    "looks",
    "good",
    "can",
    "help",
    "today",
    // formal
    "application",
    "indicates",
    "applicant",
    "demonstrates",
    "elevated",
    "diminished",
    "assessment",
    "favorable",
    "unfavorable",
    "considerably",
    "substantially",
    "consequently",
    // politeness markers and their companions
    "thank",
    "you",
    "please",
    "appreciate",
    "glad",
    "hello",
    "kindly",
];

/// Reasoning-only words. Disjoint from the explanation set so that a latent
/// chain never reads as part of an explanation in the recency features.
const REASONING_WORDS: &[&str] = &["risk", "fine", "strong", "weak", "check"];

/// Which part of a trajectory a token is generated in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Reasoning,
    Explanation,
    Prediction,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Reasoning, Phase::Explanation, Phase::Prediction];

    pub fn index(self) -> usize {
        match self {
            Phase::Reasoning => 0,
            Phase::Explanation => 1,
            Phase::Prediction => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Control,
    Period,
    Word,
    FeatureName(usize),
    FeatureValue { feature: usize, bucket: usize },
}

#[derive(Debug, Clone)]
pub struct TokenInfo {
    pub name: String,
    pub surface: String,
    pub kind: TokenKind,
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<TokenInfo>,
    by_name: HashMap<String, TokenId>,
    feature_dims: usize,
    first_feature_name: usize,
    first_feature_value: usize,
    allowed: [Vec<TokenId>; 3],
    hash: String,
}

impl Vocab {
    pub fn for_schema(schema: &FeatureSchema) -> Self {
        let mut tokens: Vec<TokenInfo> = CONTROL
            .iter()
            .map(|n| TokenInfo { name: n.to_string(), surface: String::new(), kind: TokenKind::Control })
            .collect();
        tokens.push(TokenInfo { name: PERIOD.into(), surface: PERIOD.into(), kind: TokenKind::Period });
        for w in EXPLANATION_WORDS.iter().chain(REASONING_WORDS) {
            tokens.push(TokenInfo { name: w.to_string(), surface: w.to_string(), kind: TokenKind::Word });
        }
        let first_feature_name = tokens.len();
        for (j, f) in schema.features.iter().enumerate() {
            tokens.push(TokenInfo {
                name: f.name.clone(),
                surface: f.surface.clone(),
                kind: TokenKind::FeatureName(j),
            });
        }
        let first_feature_value = tokens.len();
        for (j, f) in schema.features.iter().enumerate() {
            for b in 0..BUCKETS {
                let name = format!("{}={}", f.name, b);
                tokens.push(TokenInfo {
                    surface: name.clone(),
                    name,
                    kind: TokenKind::FeatureValue { feature: j, bucket: b },
                });
            }
        }
        assert!(tokens.len() <= u16::MAX as usize, "vocabulary too large");

        let by_name: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.name.clone(), TokenId(i as u16))).collect();
        assert_eq!(by_name.len(), tokens.len(), "duplicate token names");

        let id = |n: &str| by_name[n];
        let feature_names = (0..schema.features.len()).map(|j| TokenId((first_feature_name + j) as u16));

        let mut reasoning: Vec<TokenId> = REASONING_WORDS.iter().map(|w| id(w)).collect();
        reasoning.push(END_REASON);

        let mut explanation: Vec<TokenId> = feature_names.collect();
        explanation.extend(EXPLANATION_WORDS.iter().map(|w| id(w)));
        explanation.push(id(PERIOD));
        explanation.push(END_EXPLAIN);

        let mut allowed = [reasoning, explanation, vec![APPROVE, DENY]];
        for set in allowed.iter_mut() {
            set.sort();
            set.dedup();
        }

        let mut hasher = Sha256::new();
        for t in &tokens {
            hasher.update(t.name.as_bytes());
            hasher.update([0u8]);
            hasher.update(t.surface.as_bytes());
            hasher.update(*b"\n");
        }
        let hash = hex::encode(hasher.finalize());

        Vocab {
            tokens,
            by_name,
            feature_dims: schema.features.len(),
            first_feature_name,
            first_feature_value,
            allowed,
            hash,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn feature_dims(&self) -> usize {
        self.feature_dims
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn info(&self, t: TokenId) -> &TokenInfo {
        &self.tokens[t.index()]
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.index() < self.tokens.len()
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        self.by_name.get(name).copied()
    }

    /// Looks up a word the templates rely on. Panics on unknown words, which
    /// would be a bug in a template rather than bad input.
    pub fn word(&self, w: &str) -> TokenId {
        self.id(w).unwrap_or_else(|| panic!("word {w:?} not in vocabulary"))
    }

    pub fn period(&self) -> TokenId {
        self.word(PERIOD)
    }

    pub fn feature_name(&self, feature: usize) -> TokenId {
        assert!(feature < self.feature_dims);
        TokenId((self.first_feature_name + feature) as u16)
    }

    pub fn feature_value(&self, feature: usize, bucket: usize) -> TokenId {
        assert!(feature < self.feature_dims && bucket < BUCKETS);
        TokenId((self.first_feature_value + feature * BUCKETS + bucket) as u16)
    }

    /// Tokens the policy may emit in `phase`, sorted by id.
    pub fn allowed(&self, phase: Phase) -> &[TokenId] {
        &self.allowed[phase.index()]
    }

    /// Renders tokens as text, dropping control tokens and attaching periods
    /// to the preceding word.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            let info = self.info(t);
            match info.kind {
                TokenKind::Control => continue,
                TokenKind::Period => out.push_str(&info.surface),
                _ => {
                    if !out.is_empty() {
                        out.push(' ');
                    }
                    out.push_str(&info.surface);
                }
            }
        }
        out
    }
}
