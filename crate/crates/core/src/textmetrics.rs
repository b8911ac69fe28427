//! Rule-based tone scoring for explanation text.
//!
//! Readability is the Flesch–Kincaid grade `0.39·(words/sentences) +
//! 11.8·(syllables/words) − 15.59`, floored at 0. Syllables are counted as
//! maximal vowel groups (`a e i o u y`), minus one for a terminal silent `e`
//! (an `e` ending the word after a consonant) unless that leaves zero.
//! Politeness is the fraction of word tokens covered by lexicon marker spans.
//!
//! Words are maximal runs of letters, digits and apostrophes. Sentences are
//! the non-empty stretches between runs of `.`, `!` and `?`, with a minimum
//! of one.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grade at or below which an explanation earns the readability reward.
pub const READ_GRADE_TARGET: f64 = 8.0;
/// Density multiplier for the politeness reward (saturates at density 0.25).
pub const POLITENESS_SCALE: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum TextError {
    #[error("cannot count syllables of an empty word")]
    EmptyWord,
    #[error("text contains no words")]
    NoWords,
    #[error("politeness lexicon is empty")]
    EmptyLexicon,
    #[error("reading lexicon: {0}")]
    Io(String),
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

pub fn count_syllables(word: &str) -> Result<usize, TextError> {
    let letters: Vec<char> = word.chars().filter(|c| c.is_alphabetic()).flat_map(char::to_lowercase).collect();
    if letters.is_empty() {
        if word.is_empty() {
            return Err(TextError::EmptyWord);
        }
        // numerals and the like still count as one spoken unit
        return Ok(1);
    }
    let mut groups = 0;
    let mut prev_vowel = false;
    for &c in &letters {
        let v = is_vowel(c);
        if v && !prev_vowel {
            groups += 1;
        }
        prev_vowel = v;
    }
    let n = letters.len();
    let silent_e = n >= 2 && letters[n - 1] == 'e' && !is_vowel(letters[n - 2]);
    if silent_e && groups > 1 {
        groups -= 1;
    }
    Ok(groups.max(1))
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Word tokens of `text`, in order.
pub fn words(text: &str) -> Vec<&str> {
    text.split(|c: char| !is_word_char(c)).filter(|w| !w.is_empty()).collect()
}

pub fn sentence_count(text: &str) -> usize {
    text.split(['.', '!', '?']).filter(|s| s.chars().any(is_word_char)).count().max(1)
}

/// Word, sentence and syllable counts behind a grade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextCounts {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
}

pub fn text_counts(text: &str) -> Result<TextCounts, TextError> {
    let ws = words(text);
    if ws.is_empty() {
        return Err(TextError::NoWords);
    }
    let syllables = ws.iter().map(|w| count_syllables(w)).sum::<Result<usize, _>>()?;
    Ok(TextCounts { words: ws.len(), sentences: sentence_count(text), syllables })
}

pub fn fk_grade(text: &str) -> Result<f64, TextError> {
    let c = text_counts(text)?;
    let words = c.words as f64;
    let grade = 0.39 * (words / c.sentences as f64) + 11.8 * (c.syllables as f64 / words) - 15.59;
    Ok(grade.max(0.0))
}

/// Politeness markers, each a lowercase word sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    markers: Vec<Vec<String>>,
}

/// Gratitude, deference, greeting and positive markers.
const DEFAULT_MARKERS: &[&str] = &[
    "thank you",
    "thank",
    "thanks",
    "appreciate",
    "grateful",
    "please",
    "kindly",
    "hello",
    "hi",
    "glad",
    "welcome",
    "happy to help",
];

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::new(DEFAULT_MARKERS.iter().copied()).expect("default lexicon is non-empty")
    }
}

impl Lexicon {
    pub fn new<'a>(markers: impl IntoIterator<Item = &'a str>) -> Result<Self, TextError> {
        let markers: Vec<Vec<String>> = markers
            .into_iter()
            .map(|m| words(m).into_iter().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|m| !m.is_empty())
            .collect();
        if markers.is_empty() {
            return Err(TextError::EmptyLexicon);
        }
        Ok(Lexicon { markers })
    }

    /// One marker per line; blank lines and `#` comments are ignored.
    pub fn parse(contents: &str) -> Result<Self, TextError> {
        Lexicon::new(contents.lines().map(|l| l.split('#').next().unwrap_or("").trim()).filter(|l| !l.is_empty()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextError> {
        let contents = std::fs::read_to_string(path).map_err(|e| TextError::Io(e.to_string()))?;
        Lexicon::parse(&contents)
    }

    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }
}

/// Share of word tokens covered by at least one marker occurrence; 0 for empty text.
pub fn politeness_density(text: &str, lexicon: &Lexicon) -> f64 {
    let tokens: Vec<String> = words(text).into_iter().map(str::to_lowercase).collect();
    if tokens.is_empty() {
        return 0.0;
    }
    let mut covered = vec![false; tokens.len()];
    for marker in &lexicon.markers {
        let m = marker.len();
        if m > tokens.len() {
            continue;
        }
        for start in 0..=tokens.len() - m {
            if tokens[start..start + m] == marker[..] {
                covered[start..start + m].iter_mut().for_each(|c| *c = true);
            }
        }
    }
    covered.iter().filter(|&&c| c).count() as f64 / tokens.len() as f64
}

pub fn read_reward(fk_grade: f64) -> f64 {
    if fk_grade <= READ_GRADE_TARGET {
        1.0
    } else {
        0.0
    }
}

pub fn polite_reward(density: f64) -> f64 {
    (POLITENESS_SCALE * density).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToneMetrics {
    pub fk_grade: f64,
    pub politeness_density: f64,
    pub r_read: f64,
    pub r_polite: f64,
}

impl ToneMetrics {
    pub fn from_parts(fk_grade: f64, politeness_density: f64) -> Self {
        ToneMetrics {
            fk_grade,
            politeness_density,
            r_read: read_reward(fk_grade),
            r_polite: polite_reward(politeness_density),
        }
    }

    pub fn reward(&self) -> f64 {
        self.r_read + self.r_polite
    }
}

pub fn tone_metrics(explanation: &str, lexicon: &Lexicon) -> Result<ToneMetrics, TextError> {
    Ok(ToneMetrics::from_parts(fk_grade(explanation)?, politeness_density(explanation, lexicon)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn syllable_examples() {
        assert_eq!(count_syllables("loan"), Ok(1));
        assert_eq!(count_syllables("income"), Ok(2));
        assert_eq!(count_syllables("a"), Ok(1));
        assert_eq!(count_syllables("the"), Ok(1));
        assert_eq!(count_syllables("agree"), Ok(2));
        assert_eq!(count_syllables("Application"), Ok(4));
        assert_eq!(count_syllables(""), Err(TextError::EmptyWord));
    }

    #[test]
    fn grade_floor_and_duplication() {
        assert_eq!(fk_grade("Loan."), Ok(0.0));
        let one = "The applicant demonstrates considerably elevated debt.";
        let two = format!("{one} {one}");
        assert_eq!(fk_grade(one), fk_grade(&two));
        assert_eq!(fk_grade("..."), Err(TextError::NoWords));
    }

    #[test]
    fn density_examples() {
        let lex = Lexicon::default();
        assert_eq!(politeness_density("a b c d e f g h i please", &lex), 0.1);
        assert_eq!(politeness_density("your loan is fine", &lex), 0.0);
        assert_eq!(politeness_density("", &lex), 0.0);
        let lex = Lexicon::new(["thank you", "please"]).unwrap();
        assert_eq!(politeness_density("thank you please", &lex), 1.0);
        assert_eq!(politeness_density("Thank You, PLEASE.", &lex), 1.0);
    }

    #[test]
    fn lexicon_file_format() {
        let lex = Lexicon::parse("# gratitude\nthank you\n\nplease # deference\n").unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(Lexicon::parse("# nothing\n\n"), Err(TextError::EmptyLexicon));
    }

    #[test]
    fn reward_transforms() {
        assert_eq!(polite_reward(0.25), 1.0);
        assert_eq!(polite_reward(0.05), 0.2);
        assert_eq!(polite_reward(0.9), 1.0);
        assert_eq!(read_reward(8.0), 1.0);
        assert_eq!(read_reward(8.000001), 0.0);
        let m = ToneMetrics::from_parts(8.0, 0.1);
        assert!((m.reward() - 1.4).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn polite_reward_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(polite_reward(lo) <= polite_reward(hi));
            prop_assert!((0.0..=1.0).contains(&polite_reward(a)));
            if a >= 0.25 {
                prop_assert_eq!(polite_reward(a), 1.0);
            }
        }

        #[test]
        fn metrics_are_pure(s in "[a-z .!?]{0,60}") {
            let lex = Lexicon::default();
            prop_assert_eq!(fk_grade(&s), fk_grade(&s));
            prop_assert_eq!(politeness_density(&s, &lex), politeness_density(&s, &lex));
            let d = politeness_density(&s, &lex);
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
