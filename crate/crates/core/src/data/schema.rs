use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, Decision};
use crate::vocab::BUCKETS;

/// 25th percentile of the standard normal; places the rule threshold so that
/// roughly three in four synthetic applications are approved.
const APPROVAL_QUANTILE_Z: f64 = -0.674_489_750_196_081_7;

/// One numeric input field.
///
/// `weight` is the field's contribution per standard deviation to the
/// labeling rule. Values are drawn uniformly in `[lo, hi]`, and the same range
/// defines the bucket edges, so buckets are equal-probability by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub surface: String,
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

impl FeatureSpec {
    fn new(name: &str, surface: &str, lo: f64, hi: f64, weight: f64) -> Self {
        FeatureSpec { name: name.into(), surface: surface.into(), lo, hi, weight }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn std_dev(&self) -> f64 {
        (self.hi - self.lo) / 12f64.sqrt()
    }

    /// Standardized value under the generator's distribution.
    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean()) / self.std_dev()
    }

    /// Magnitude bucket of `x` and whether it had to be clamped into range.
    pub fn bucket(&self, x: f64) -> (usize, bool) {
        if x.is_nan() || x < self.lo {
            return (0, true);
        }
        if x > self.hi {
            return (BUCKETS - 1, true);
        }
        let width = (self.hi - self.lo) / BUCKETS as f64;
        let b = ((x - self.lo) / width).floor() as usize;
        (b.min(BUCKETS - 1), false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

fn catalog() -> Vec<FeatureSpec> {
    vec![
        FeatureSpec::new("income", "income", 20.0, 250.0, 1.0),
        FeatureSpec::new("loan_amount", "loan amount", 50.0, 800.0, -0.7),
        FeatureSpec::new("dti_ratio", "debt ratio", 5.0, 60.0, -1.2),
        FeatureSpec::new("ltv_ratio", "loan to value", 40.0, 100.0, -0.9),
        FeatureSpec::new("property_value", "property value", 80.0, 1200.0, 0.5),
        FeatureSpec::new("credit_score", "credit score", 550.0, 850.0, 1.4),
        FeatureSpec::new("interest_rate", "interest rate", 3.0, 9.0, -0.4),
        FeatureSpec::new("employment_years", "job tenure", 0.0, 30.0, 0.3),
    ]
}

impl Default for FeatureSchema {
    fn default() -> Self {
        FeatureSchema { features: catalog() }
    }
}

impl FeatureSchema {
    pub const MAX_DIMS: usize = 8;

    /// The first `dims` fields of the built-in catalog.
    pub fn with_dims(dims: usize) -> Result<Self, DataError> {
        if dims == 0 || dims > Self::MAX_DIMS {
            return Err(DataError::Dims { got: dims, max: Self::MAX_DIMS });
        }
        let mut features = catalog();
        features.truncate(dims);
        Ok(FeatureSchema { features })
    }

    pub fn dims(&self) -> usize {
        self.features.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Raw-scale labeling rule: approve iff `w·x > b`.
    pub fn rule(&self) -> LabelRule {
        let norm = self.features.iter().map(|f| f.weight * f.weight).sum::<f64>().sqrt();
        let threshold = APPROVAL_QUANTILE_Z * norm;
        let weights: Vec<f64> = self.features.iter().map(|f| f.weight / f.std_dev()).collect();
        let bias = threshold + self.features.iter().zip(&weights).map(|(f, w)| w * f.mean()).sum::<f64>();
        LabelRule { weights, bias }
    }

    /// Per-feature contribution to the rule score, in standardized units.
    pub fn contributions(&self, x: &[f64]) -> Vec<f64> {
        self.features.iter().zip(x).map(|(f, v)| f.weight * f.standardize(*v)).collect()
    }

    pub fn order_features(&self, named: &BTreeMap<String, f64>) -> Result<Vec<f64>, String> {
        if let Some(extra) = named.keys().find(|k| self.index_of(k).is_none()) {
            return Err(format!("unknown feature {extra:?}"));
        }
        self.features
            .iter()
            .map(|f| named.get(&f.name).copied().ok_or_else(|| format!("missing feature {:?}", f.name)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LabelRule {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() - self.bias
    }

    pub fn decide(&self, x: &[f64]) -> Decision {
        if self.score(x) > 0.0 {
            Decision::Approve
        } else {
            Decision::Deny
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buckets_cover_range_with_clamping() {
        let f = FeatureSpec::new("x", "x", 0.0, 8.0, 1.0);
        assert_eq!(f.bucket(0.0), (0, false));
        assert_eq!(f.bucket(0.999), (0, false));
        assert_eq!(f.bucket(1.0), (1, false));
        assert_eq!(f.bucket(8.0), (7, false));
        assert_eq!(f.bucket(-1.0), (0, true));
        assert_eq!(f.bucket(9.0), (7, true));
    }

    #[test]
    fn dims_bounds() {
        assert!(FeatureSchema::with_dims(0).is_err());
        assert!(FeatureSchema::with_dims(9).is_err());
        assert_eq!(FeatureSchema::with_dims(3).unwrap().dims(), 3);
    }

    #[test]
    fn raw_rule_matches_standardized_score() {
        let schema = FeatureSchema::default();
        let rule = schema.rule();
        let x: Vec<f64> = schema.features.iter().map(|f| f.lo + 0.3 * (f.hi - f.lo)).collect();
        let norm = schema.features.iter().map(|f| f.weight * f.weight).sum::<f64>().sqrt();
        let standardized: f64 = schema.contributions(&x).iter().sum::<f64>() - APPROVAL_QUANTILE_Z * norm;
        assert!((rule.score(&x) - standardized).abs() < 1e-9);
    }
}
