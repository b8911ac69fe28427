use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lexma_core::data::{
    balance_and_split, generate_synthetic, load_csv, read_jsonl, write_jsonl, CaseRecord, Decision, FeatureSchema,
    PromptMode, Serializer, StageSplits,
};
use lexma_core::eval::{ablation_run, logistic_baseline, AblationReport, DistributionStats, EvalEnv, MetricsReport};
use lexma_core::grpo::{run_stage1, run_stage2, StageEnv, StepMetrics};
use lexma_core::policy::{load_checkpoint, save_checkpoint, PolicyParams, Provenance};
use lexma_core::sft::{build_sft_dataset, sft_train, write_sft_jsonl, Teacher};
use lexma_core::textmetrics::Lexicon;
use lexma_core::vocab::Vocab;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CHECKPOINTS: [&str; 4] = ["raw", "sft", "step1", "step2"];
pub const FAILED_MARKER: &str = "FAILED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub source: String,
    pub n_cases: usize,
    pub approve_rate: f64,
    pub csv_dropped: usize,
    pub csv_excluded: usize,
    pub split_sizes: [usize; 4],
    pub split_hashes: BTreeMap<String, String>,
}

/// Cases, schema and stage splits for one config.
pub struct Prepared {
    pub schema: FeatureSchema,
    pub vocab: Vocab,
    pub cases: Vec<CaseRecord>,
    pub splits: StageSplits,
    index: HashMap<u64, usize>,
    csv_counts: Option<(usize, usize)>,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let schema = cfg.schema();
        let seeds = cfg.seeds();
        let (cases, csv_counts) = match &cfg.data.csv_path {
            Some(path) => {
                let l = load_csv(path, &schema).with_context(|| format!("loading {}", path.display()))?;
                info!(
                    "loaded {} cases from {} ({} dropped, {} excluded)",
                    l.cases.len(),
                    path.display(),
                    l.dropped_count,
                    l.excluded_count
                );
                (l.cases, Some((l.dropped_count, l.excluded_count)))
            }
            None => (generate_synthetic(&schema, cfg.data.n_cases, seeds.data, cfg.data.noise)?, None),
        };
        let splits = balance_and_split(&cases, cfg.data.sizes, seeds.split)?;
        if !splits.is_disjoint() {
            bail!("stage splits overlap");
        }
        let index = cases.iter().enumerate().map(|(i, c)| (c.id, i)).collect();
        let vocab = Vocab::for_schema(&schema);
        Ok(Prepared { schema, vocab, cases, splits, index, csv_counts })
    }

    pub fn select(&self, ids: &[u64]) -> Vec<&CaseRecord> {
        ids.iter().map(|id| &self.cases[self.index[id]]).collect()
    }

    pub fn serializer(&self) -> Serializer<'_> {
        Serializer::new(&self.schema, &self.vocab)
    }

    pub fn summary(&self) -> DataSummary {
        let approve = self.cases.iter().filter(|c| c.label == Decision::Approve).count();
        let (dropped, excluded) = self.csv_counts.unwrap_or((0, 0));
        DataSummary {
            source: if self.csv_counts.is_some() { "csv".into() } else { "synthetic".into() },
            n_cases: self.cases.len(),
            approve_rate: approve as f64 / self.cases.len().max(1) as f64,
            csv_dropped: dropped,
            csv_excluded: excluded,
            split_sizes: [
                self.splits.sft.len(),
                self.splits.grpo1.len(),
                self.splits.grpo2.len(),
                self.splits.test.len(),
            ],
            split_hashes: self
                .splits
                .stages()
                .iter()
                .map(|(name, ids)| (name.to_string(), lexma_core::data::id_hash(ids)))
                .collect(),
        }
    }
}

/// Output directory of one run; every artifact carries the config hash and seed.
pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
    pub seed: u64,
}

impl RunDir {
    pub fn create(root: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf(), config_hash: cfg.hash(), seed: cfg.data.seed })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_hash: self.config_hash.clone(), seed: self.seed }
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut w = BufWriter::new(File::create(self.path(name))?);
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Writes `rows` with `config_hash` and `seed` appended to every record.
    pub fn write_csv<R: CsvRow>(&self, name: &str, rows: &[R]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        let mut header: Vec<&str> = R::header().to_vec();
        header.extend(["config_hash", "seed"]);
        w.write_record(&header)?;
        let seed = self.seed.to_string();
        for r in rows {
            let mut rec = r.fields();
            rec.push(self.config_hash.clone());
            rec.push(seed.clone());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_checkpoint(&self, name: &str, params: &PolicyParams) -> Result<()> {
        save_checkpoint(self.path(&format!("{name}.json")), params, Some(self.provenance()))?;
        Ok(())
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<PolicyParams> {
        let path = self.path(&format!("{name}.json"));
        let (params, prov) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        match prov {
            Some(p) if p.config_hash != self.config_hash => {
                warn!(
                    "{} was written under config {}, current config is {}",
                    path.display(),
                    p.config_hash,
                    self.config_hash
                )
            }
            None => warn!("{} carries no provenance", path.display()),
            _ => {}
        }
        Ok(params)
    }

    pub fn mark_failed(&self, err: &anyhow::Error) {
        let _ = fs::write(self.path(FAILED_MARKER), format!("{err:#}\n"));
    }

    pub fn clear_failed(&self) -> Result<()> {
        match fs::remove_file(self.path(FAILED_MARKER)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e.into()),
            _ => Ok(()),
        }
    }
}

/// A CSV record as plain strings; floats use the shortest round-trip form.
pub trait CsvRow {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

impl CsvRow for StepMetrics {
    fn header() -> &'static [&'static str] {
        &[
            "step",
            "stage",
            "mean_reward",
            "objective",
            "kl",
            "mean_fk",
            "mean_density",
            "accuracy_probe",
            "degenerate_groups",
            "clipped",
            "dropped",
        ]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            self.stage.to_string(),
            self.mean_reward.to_string(),
            self.objective.to_string(),
            self.kl.to_string(),
            self.mean_fk.to_string(),
            self.mean_density.to_string(),
            self.accuracy_probe.to_string(),
            self.degenerate_groups.to_string(),
            self.clipped.to_string(),
            self.dropped.to_string(),
        ]
    }
}

impl CsvRow for MetricsReport {
    fn header() -> &'static [&'static str] {
        &["checkpoint", "prompt_mode", "accuracy", "precision", "recall", "f1", "tp", "fp", "tn", "fn", "degenerate"]
    }

    fn fields(&self) -> Vec<String> {
        let c = self.confusion;
        vec![
            self.checkpoint.clone(),
            self.prompt_mode.map(|m| m.to_string()).unwrap_or_default(),
            self.accuracy.to_string(),
            self.precision.to_string(),
            self.recall.to_string(),
            self.f1.to_string(),
            c.tp.to_string(),
            c.fp.to_string(),
            c.tn.to_string(),
            c.fn_.to_string(),
            self.degenerate.to_string(),
        ]
    }
}

struct LossRow {
    epoch: usize,
    loss: f64,
}

impl CsvRow for LossRow {
    fn header() -> &'static [&'static str] {
        &["epoch", "cross_entropy"]
    }

    fn fields(&self) -> Vec<String> {
        vec![self.epoch.to_string(), self.loss.to_string()]
    }
}

struct ToneStatRow<'a> {
    checkpoint: &'a str,
    stats: &'a DistributionStats,
}

impl CsvRow for ToneStatRow<'_> {
    fn header() -> &'static [&'static str] {
        &["checkpoint", "metric", "count", "mean", "std_dev", "min", "median", "max"]
    }

    fn fields(&self) -> Vec<String> {
        let s = self.stats;
        let metric = serde_json::to_value(s.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        vec![
            self.checkpoint.to_string(),
            metric,
            s.count.to_string(),
            s.mean.to_string(),
            s.std_dev.to_string(),
            s.min.to_string(),
            s.median.to_string(),
            s.max.to_string(),
        ]
    }
}

struct CaseToneRow(lexma_core::eval::CaseTone);

impl CsvRow for CaseToneRow {
    fn header() -> &'static [&'static str] {
        &["case_id", "fk_grade", "density"]
    }

    fn fields(&self) -> Vec<String> {
        vec![self.0.case_id.to_string(), self.0.fk_grade.to_string(), self.0.density.to_string()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftSummary {
    pub examples: usize,
    pub reflected_rate: f64,
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoSummary {
    pub steps: usize,
    pub first_mean_reward: Option<f64>,
    pub last_mean_reward: Option<f64>,
    pub degenerate_groups: usize,
    pub clipped: usize,
    pub dropped: usize,
}

impl GrpoSummary {
    fn from_log(log: &[StepMetrics]) -> Self {
        GrpoSummary {
            steps: log.len(),
            first_mean_reward: log.first().map(|m| m.mean_reward),
            last_mean_reward: log.last().map(|m| m.mean_reward),
            degenerate_groups: log.iter().map(|m| m.degenerate_groups).sum(),
            clipped: log.iter().map(|m| m.clipped).sum(),
            dropped: log.iter().map(|m| m.dropped).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToneSummary {
    pub checkpoint: String,
    pub fk: DistributionStats,
    pub density: DistributionStats,
    pub empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub test_hash: String,
    pub ablation: Vec<MetricsReport>,
    pub tone: Vec<ToneSummary>,
    pub logistic_baseline: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub data: DataSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft: Option<SftSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grpo1: Option<GrpoSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grpo2: Option<GrpoSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

impl Summary {
    fn new(cfg: &RunConfig, run: &RunDir, data: &Prepared) -> Self {
        Summary {
            config_hash: run.config_hash.clone(),
            seed: run.seed,
            config: cfg.clone(),
            data: data.summary(),
            sft: None,
            grpo1: None,
            grpo2: None,
            eval: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
    }
}

pub fn write_data(run: &RunDir, data: &Prepared) -> Result<()> {
    let mut w = BufWriter::new(File::create(run.path("cases.jsonl"))?);
    write_jsonl(&mut w, &data.schema, &data.cases)?;
    w.flush()?;
    #[derive(Serialize)]
    struct Splits<'a> {
        config_hash: &'a str,
        seed: u64,
        splits: &'a StageSplits,
        summary: DataSummary,
    }
    run.write_json(
        "splits.json",
        &Splits { config_hash: &run.config_hash, seed: run.seed, splits: &data.splits, summary: data.summary() },
    )
}

pub fn read_cases(path: &Path, schema: &FeatureSchema) -> Result<Vec<CaseRecord>> {
    Ok(read_jsonl(BufReader::new(File::open(path)?), schema)?)
}

/// Raw initialization and supervised fine-tuning; writes `raw`, `sft`,
/// the SFT dataset dump and the loss curve.
pub fn stage_sft(cfg: &RunConfig, data: &Prepared, run: &RunDir) -> Result<(PolicyParams, PolicyParams, SftSummary)> {
    let seeds = cfg.seeds();
    let raw = PolicyParams::new_raw(
        &data.vocab,
        cfg.policy.rank,
        cfg.policy.recency_window,
        cfg.policy.init_scale,
        seeds.raw_init,
    );
    run.save_checkpoint("raw", &raw)?;

    let teacher = Teacher::new(&data.schema, &data.vocab);
    let serializer = data.serializer();
    let cases = data.select(&data.splits.sft);
    let examples = build_sft_dataset(&teacher, &serializer, &cases, cfg.sft.fallibility, seeds.sft_data)?;
    let mut w = BufWriter::new(File::create(run.path("sft_data.jsonl"))?);
    write_sft_jsonl(&mut w, &examples)?;
    w.flush()?;

    let (sft, report) = sft_train(&raw, &data.vocab, &examples, &cfg.sft_config(), &cfg.policy.caps)?;
    run.save_checkpoint("sft", &sft)?;
    let rows: Vec<LossRow> =
        report.epoch_loss.iter().enumerate().map(|(epoch, &loss)| LossRow { epoch, loss }).collect();
    run.write_csv("sft_loss.csv", &rows)?;
    let reflected = examples.iter().filter(|e| e.reflected).count();
    let summary = SftSummary {
        examples: examples.len(),
        reflected_rate: reflected as f64 / examples.len().max(1) as f64,
        epoch_loss: report.epoch_loss,
    };
    Ok((raw, sft, summary))
}

fn stage_env<'a>(
    data: &'a Prepared,
    serializer: &'a Serializer<'a>,
    cfg: &'a RunConfig,
    lexicon: &'a Lexicon,
) -> StageEnv<'a> {
    StageEnv { vocab: &data.vocab, serializer, caps: &cfg.policy.caps, lexicon }
}

/// Stage 1: attaches ACC to the SFT checkpoint and trains it; writes `step1`.
pub fn stage_grpo1(
    cfg: &RunConfig,
    data: &Prepared,
    run: &RunDir,
    sft: &PolicyParams,
) -> Result<(PolicyParams, Vec<StepMetrics>)> {
    let mut params = sft.clone();
    params.attach_acc(cfg.policy.acc_init_scale, cfg.seeds().acc_init);
    let lexicon = Lexicon::default();
    let serializer = data.serializer();
    let env = stage_env(data, &serializer, cfg, &lexicon);
    let (step1, log) = run_stage1(&params, &env, &data.select(&data.splits.grpo1), &cfg.grpo1_config())?;
    run.save_checkpoint("step1", &step1)?;
    run.write_csv("grpo1_metrics.csv", &log)?;
    Ok((step1, log))
}

/// Stage 2: freezes ACC, attaches TONE and trains it; writes `step2`.
pub fn stage_grpo2(
    cfg: &RunConfig,
    data: &Prepared,
    run: &RunDir,
    step1: &PolicyParams,
) -> Result<(PolicyParams, Vec<StepMetrics>)> {
    let mut params = step1.clone();
    params.attach_tone(cfg.policy.tone_init_scale, cfg.seeds().tone_init);
    let lexicon = Lexicon::default();
    let serializer = data.serializer();
    let env = stage_env(data, &serializer, cfg, &lexicon);
    let (step2, log) = run_stage2(&params, &env, &data.select(&data.splits.grpo2), &cfg.grpo2_config())?;
    if step2.base != step1.base || step2.acc != step1.acc {
        bail!("stage 2 modified frozen parameters");
    }
    run.save_checkpoint("step2", &step2)?;
    run.write_csv("grpo2_metrics.csv", &log)?;
    Ok((step2, log))
}

/// Four-checkpoint ablation plus the logistic baseline.
pub fn stage_eval(
    cfg: &RunConfig,
    data: &Prepared,
    run: &RunDir,
    checkpoints: &[(&str, &PolicyParams)],
) -> Result<EvalSummary> {
    let lexicon = Lexicon::default();
    let serializer = data.serializer();
    let env = EvalEnv { vocab: &data.vocab, serializer: &serializer, caps: &cfg.policy.caps, lexicon: &lexicon };
    let test = data.select(&data.splits.test);
    let report: AblationReport = ablation_run(checkpoints, &env, &test, Some(&data.splits.test_hash()))?;
    run.write_csv("ablation.csv", &report.rows)?;

    let mut stat_rows = Vec::new();
    for t in &report.tone {
        stat_rows.push(ToneStatRow { checkpoint: &t.checkpoint, stats: &t.tone.fk });
        stat_rows.push(ToneStatRow { checkpoint: &t.checkpoint, stats: &t.tone.density });
        let per_case: Vec<CaseToneRow> = t.tone.per_case.iter().copied().map(CaseToneRow).collect();
        run.write_csv(&format!("tone_cases_{}.csv", t.checkpoint), &per_case)?;
    }
    run.write_csv("tone_distributions.csv", &stat_rows)?;

    let train = data.select(&data.splits.sft);
    let mut baseline =
        logistic_baseline(&train, &test, cfg.eval.logistic_lr, cfg.eval.logistic_iters, cfg.eval.logistic_l2)?;
    baseline.prompt_mode = None;
    run.write_csv("baseline.csv", std::slice::from_ref(&baseline))?;

    for mode in PromptMode::BOTH {
        let accs: Vec<String> = report
            .rows
            .iter()
            .filter(|r| r.prompt_mode == Some(mode))
            .map(|r| format!("{} {:.3}", r.checkpoint, r.accuracy))
            .collect();
        info!("{mode} accuracy: {}", accs.join(", "));
    }
    Ok(EvalSummary {
        test_hash: report.test_hash.clone(),
        tone: report
            .tone
            .into_iter()
            .map(|t| ToneSummary {
                checkpoint: t.checkpoint,
                fk: t.tone.fk,
                density: t.tone.density,
                empty: t.tone.empty,
            })
            .collect(),
        ablation: report.rows,
        logistic_baseline: baseline,
    })
}

/// Data → SFT → Stage 1 → Stage 2 → ablation, writing every artifact under `run`.
pub fn run_pipeline(cfg: &RunConfig, run: &RunDir) -> Result<Summary> {
    let data = Prepared::load(cfg)?;
    write_data(run, &data)?;
    let mut summary = Summary::new(cfg, run, &data);

    info!("supervised fine-tuning on {} cases", data.splits.sft.len());
    let (raw, sft, sft_summary) = stage_sft(cfg, &data, run)?;
    summary.sft = Some(sft_summary);

    info!("stage 1 on {} cases", data.splits.grpo1.len());
    let (step1, log1) = stage_grpo1(cfg, &data, run, &sft)?;
    summary.grpo1 = Some(GrpoSummary::from_log(&log1));

    info!("stage 2 on {} cases", data.splits.grpo2.len());
    let (step2, log2) = stage_grpo2(cfg, &data, run, &step1)?;
    summary.grpo2 = Some(GrpoSummary::from_log(&log2));

    let checkpoints: Vec<(&str, &PolicyParams)> =
        CHECKPOINTS.iter().copied().zip([&raw, &sft, &step1, &step2]).collect();
    summary.eval = Some(stage_eval(cfg, &data, run, &checkpoints)?);
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}

/// Ablation over checkpoints already present in `run`.
pub fn run_eval_only(cfg: &RunConfig, run: &RunDir) -> Result<Summary> {
    let data = Prepared::load(cfg)?;
    let params: Vec<PolicyParams> = CHECKPOINTS.iter().map(|n| run.load_checkpoint(n)).collect::<Result<_>>()?;
    let checkpoints: Vec<(&str, &PolicyParams)> = CHECKPOINTS.iter().copied().zip(params.iter()).collect();
    let mut summary = Summary::new(cfg, run, &data);
    summary.eval = Some(stage_eval(cfg, &data, run, &checkpoints)?);
    run.write_json("summary.json", &summary)?;
    Ok(summary)
}
