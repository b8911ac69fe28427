//! Desk-scale decision-and-explanation policy trained in three stages:
//! reflection-augmented supervised fine-tuning, a correctness-rewarded GRPO
//! stage on an ACC adapter, and a tone-rewarded GRPO stage on a TONE adapter
//! with ACC frozen.

pub mod data;
pub mod eval;
pub mod grpo;
pub mod policy;
pub mod seed;
pub mod sft;
pub mod textmetrics;
pub mod vocab;
