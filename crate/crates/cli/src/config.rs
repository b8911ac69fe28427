use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lexma_core::data::{FeatureSchema, SplitSizes};
use lexma_core::grpo::GrpoConfig;
use lexma_core::policy::Caps;
use lexma_core::seed;
use lexma_core::sft::SftConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub n_cases: usize,
    pub noise: f64,
    pub csv_path: Option<PathBuf>,
    pub sizes: SplitSizes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub feature_dims: usize,
    pub rank: usize,
    pub recency_window: usize,
    pub caps: Caps,
    pub init_scale: f64,
    pub acc_init_scale: f64,
    pub tone_init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub out_dir: PathBuf,
    pub logistic_lr: f64,
    pub logistic_iters: usize,
    pub logistic_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub policy: PolicySection,
    pub sft: SftConfig,
    pub grpo1: GrpoConfig,
    pub grpo2: GrpoConfig,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataSection { seed: 42, n_cases: 6000, noise: 0.0, csv_path: None, sizes: SplitSizes::default() },
            policy: PolicySection {
                feature_dims: FeatureSchema::MAX_DIMS,
                rank: 4,
                recency_window: 8,
                caps: Caps::default(),
                init_scale: 0.02,
                acc_init_scale: 0.5,
                tone_init_scale: 0.1,
            },
            // one SFT pass leaves room for the correctness stage; the tone
            // stage stays short because its reward saturates on filler words
            sft: SftConfig { epochs: 1, lr: 1.0, ..SftConfig::default() },
            grpo1: GrpoConfig { lr: 0.05, steps: 150, group_size: 16, ..GrpoConfig::default() },
            grpo2: GrpoConfig { lr: 0.015, steps: 50, ..GrpoConfig::default() },
            eval: EvalSection {
                out_dir: PathBuf::from("runs/default"),
                logistic_lr: 0.5,
                logistic_iters: 500,
                logistic_l2: 0.0,
            },
        }
    }
}

/// Overlays `patch` on `base`; objects merge key by key, anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// Seeds per pipeline step, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageSeeds {
    pub data: u64,
    pub split: u64,
    pub raw_init: u64,
    pub sft_data: u64,
    pub sft_train: u64,
    pub acc_init: u64,
    pub grpo1: u64,
    pub tone_init: u64,
    pub grpo2: u64,
}

impl RunConfig {
    /// Parses a JSON config; missing keys take their defaults, unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).context("config is not valid JSON")?;
        if !patch.is_object() {
            bail!("config must be a JSON object");
        }
        let mut full = serde_json::to_value(RunConfig::default())?;
        merge(&mut full, patch);
        let cfg: RunConfig = serde_json::from_value(full).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=FeatureSchema::MAX_DIMS).contains(&self.policy.feature_dims) {
            bail!("policy.feature_dims must be between 1 and {}", FeatureSchema::MAX_DIMS);
        }
        if self.policy.rank == 0 || self.policy.recency_window == 0 {
            bail!("policy.rank and policy.recency_window must be positive");
        }
        for (name, s) in [
            ("policy.init_scale", self.policy.init_scale),
            ("policy.acc_init_scale", self.policy.acc_init_scale),
            ("policy.tone_init_scale", self.policy.tone_init_scale),
        ] {
            if !(s.is_finite() && s >= 0.0) {
                bail!("{name} must be finite and non-negative");
            }
        }
        self.policy.caps.validate()?;
        if !(0.0..1.0).contains(&self.sft.fallibility) {
            bail!("sft.fallibility must lie in [0, 1)");
        }
        if !(0.0..=0.5).contains(&self.data.noise) {
            bail!("data.noise must lie in [0, 0.5]");
        }
        self.grpo1.validate().context("grpo1")?;
        self.grpo2.validate().context("grpo2")?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory excluded so
    /// the same run written elsewhere keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.eval.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn seeds(&self) -> StageSeeds {
        let s = |tag: u64| seed::derive(self.data.seed, &[tag]);
        StageSeeds {
            data: s(1),
            split: s(2),
            raw_init: s(3),
            sft_data: s(4),
            sft_train: s(5),
            acc_init: s(6),
            grpo1: s(7),
            tone_init: s(8),
            grpo2: s(9),
        }
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::with_dims(self.policy.feature_dims).expect("validated feature_dims")
    }

    /// Stage configs with their derived seeds filled in.
    pub fn sft_config(&self) -> SftConfig {
        SftConfig { seed: self.seeds().sft_train, ..self.sft }
    }

    pub fn grpo1_config(&self) -> GrpoConfig {
        GrpoConfig { seed: self.seeds().grpo1, ..self.grpo1 }
    }

    pub fn grpo2_config(&self) -> GrpoConfig {
        GrpoConfig { seed: self.seeds().grpo2, ..self.grpo2 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let c = RunConfig::from_json(r#"{"grpo2": {"steps": 3}, "data": {"sizes": {"test": 10}}}"#).unwrap();
        let d = RunConfig::default();
        assert_eq!(c.grpo2.steps, 3);
        assert_eq!(c.grpo2.lr, d.grpo2.lr);
        assert_eq!(c.data.sizes.test, 10);
        assert_eq!(c.data.sizes.sft, d.data.sizes.sft);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"sft": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"extra": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"grpo1": {"seed": 3}}"#).is_err());
        assert!(RunConfig::from_json("[]").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_json(r#"{"grpo1": {"group_size": 1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"policy": {"feature_dims": 9}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"sft": {"fallibility": 1.0}}"#).is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.eval.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.data.seed = 7;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn seeds_follow_master() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.data.seed = 43;
        assert_ne!(a.seeds(), b.seeds());
        assert_eq!(a.seeds(), RunConfig::default().seeds());
        assert_eq!(a.grpo1_config().seed, a.seeds().grpo1);
    }
}
