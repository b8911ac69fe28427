use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use lexma_cli::commands::{explain, score_text};
use lexma_cli::config::RunConfig;
use lexma_cli::pipeline::{
    run_eval_only, run_pipeline, stage_grpo1, stage_grpo2, stage_sft, write_data, Prepared, RunDir,
};
use lexma_core::data::PromptMode;
use lexma_core::textmetrics::Lexicon;
use log::{error, info, LevelFilter};

#[derive(Parser)]
#[command(name = "lexma", version, about = "Train and evaluate a desk-scale decision-and-explanation policy")]
struct Cli {
    /// JSON run config; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory; overrides the config's eval.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Data, SFT, both GRPO stages and the ablation, end to end.
    Pipeline,
    /// Generate or load cases and write them with the stage splits.
    GenData,
    /// Raw initialization and supervised fine-tuning.
    Sft,
    /// Stage 1 from the run's SFT checkpoint.
    Grpo1,
    /// Stage 2 from the run's Stage-1 checkpoint.
    Grpo2,
    /// Ablation over the run's four checkpoints.
    Eval,
    /// Greedy decision and explanation for one case.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file with `features` (name to value) and optional `id`.
        #[arg(long)]
        case: PathBuf,
        #[arg(long, default_value = "consumer")]
        mode: PromptMode,
    },
    /// Readability and politeness per line of a text file.
    Score { file: PathBuf },
}

fn init_logging() {
    let level = match std::env::var("LEXMA_LOG").as_deref() {
        Ok("quiet") => LevelFilter::Warn,
        Ok("debug") => LevelFilter::Debug,
        _ => LevelFilter::Info,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.data.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.eval.out_dir = o.clone();
    }
    Ok(cfg)
}

fn run_stage_command(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    let run = RunDir::create(&cfg.eval.out_dir, &cfg)?;
    let result = (|| -> Result<()> {
        match &cli.command {
            Command::Pipeline => {
                run_pipeline(&cfg, &run)?;
            }
            Command::GenData => write_data(&run, &Prepared::load(&cfg)?)?,
            Command::Sft => {
                stage_sft(&cfg, &Prepared::load(&cfg)?, &run)?;
            }
            Command::Grpo1 => {
                let sft = run.load_checkpoint("sft")?;
                stage_grpo1(&cfg, &Prepared::load(&cfg)?, &run, &sft)?;
            }
            Command::Grpo2 => {
                let step1 = run.load_checkpoint("step1")?;
                stage_grpo2(&cfg, &Prepared::load(&cfg)?, &run, &step1)?;
            }
            Command::Eval => {
                run_eval_only(&cfg, &run)?;
            }
            Command::Explain { .. } | Command::Score { .. } => unreachable!("handled without a run directory"),
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            run.clear_failed()?;
            info!("artifacts in {}", run.root.display());
            Ok(())
        }
        Err(e) => {
            run.mark_failed(&e);
            Err(e)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .context("configuring worker threads")?;
    }
    match &cli.command {
        Command::Explain { checkpoint, case, mode } => {
            let cfg = resolve_config(&cli)?;
            let text = std::fs::read_to_string(case).with_context(|| format!("reading {}", case.display()))?;
            print!("{}", explain(checkpoint, &text, *mode, &cfg.policy.caps)?.render(*mode));
            Ok(())
        }
        Command::Score { file } => {
            let text = std::fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
            print!("{}", score_text(&text, &Lexicon::default())?.render());
            Ok(())
        }
        _ => run_stage_command(&cli),
    }
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
