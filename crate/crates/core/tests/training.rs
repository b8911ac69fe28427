use lexma_core::data::{
    balance_and_split, generate_synthetic, CaseRecord, FeatureSchema, PromptMode, Serializer, SplitSizes,
};
use lexma_core::eval::{evaluate_checkpoint, EvalEnv};
use lexma_core::policy::{Caps, PolicyParams};
use lexma_core::sft::{build_sft_dataset, sft_train, SftConfig, Teacher};
use lexma_core::textmetrics::Lexicon;
use lexma_core::vocab::Vocab;

struct Setup {
    schema: FeatureSchema,
    vocab: Vocab,
    cases: Vec<CaseRecord>,
    sft_ids: Vec<u64>,
    test_ids: Vec<u64>,
}

impl Setup {
    fn default_task() -> Self {
        let schema = FeatureSchema::default();
        let vocab = Vocab::for_schema(&schema);
        let cases = generate_synthetic(&schema, 6000, 42, 0.0).unwrap();
        let splits = balance_and_split(&cases, SplitSizes::default(), 43).unwrap();
        Setup { schema, vocab, cases, sft_ids: splits.sft, test_ids: splits.test }
    }

    fn select(&self, ids: &[u64]) -> Vec<&CaseRecord> {
        ids.iter().map(|&id| &self.cases[id as usize]).collect()
    }
}

fn train(s: &Setup, cfg: &SftConfig) -> (PolicyParams, PolicyParams, Vec<f64>) {
    let ser = Serializer::new(&s.schema, &s.vocab);
    let teacher = Teacher::new(&s.schema, &s.vocab);
    let examples = build_sft_dataset(&teacher, &ser, &s.select(&s.sft_ids), cfg.fallibility, 5).unwrap();
    let raw = PolicyParams::new_raw(&s.vocab, 4, 8, 0.02, 3);
    let (sft, report) = sft_train(&raw, &s.vocab, &examples, cfg, &Caps::default()).unwrap();
    (raw, sft, report.epoch_loss)
}

#[test]
fn sft_loss_curve_and_held_out_gain() {
    let s = Setup::default_task();
    for lr in [0.5, 1.0] {
        let cfg = SftConfig { epochs: 3, lr, seed: 11, ..SftConfig::default() };
        let (raw, sft, losses) = train(&s, &cfg);
        assert_eq!(losses.len(), 3);
        for w in losses.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "lr {lr}: epoch losses {losses:?}");
        }
        assert!(sft.acc.is_zero() && sft.tone.is_zero());
        assert!(!sft.trainable.base);

        let ser = Serializer::new(&s.schema, &s.vocab);
        let lexicon = Lexicon::default();
        let caps = Caps::default();
        let env = EvalEnv { vocab: &s.vocab, serializer: &ser, caps: &caps, lexicon: &lexicon };
        let test = s.select(&s.test_ids);
        for mode in PromptMode::BOTH {
            let before = evaluate_checkpoint("raw", &raw, &env, &test, mode).unwrap().accuracy;
            let after = evaluate_checkpoint("sft", &sft, &env, &test, mode).unwrap().accuracy;
            assert!(after > before, "lr {lr} {mode}: raw {before} sft {after}");
        }
    }
}
