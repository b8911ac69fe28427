use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lexma_core::policy::load_checkpoint;

const SMALL: &str = r#"{
    "data": {"n_cases": 800, "sizes": {"sft": 200, "grpo1": 100, "grpo2": 40, "test": 100}},
    "grpo1": {"steps": 4, "accumulation": 4},
    "grpo2": {"steps": 3, "accumulation": 4}
}"#;

fn lexma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lexma")).args(args).env("LEXMA_LOG", "quiet").output().expect("binary runs")
}

fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, contents).unwrap();
    p
}

fn pipeline(config: &Path, out: &Path) -> Output {
    lexma(&["pipeline", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status, String::from_utf8_lossy(&o.stderr));
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv" || x == "jsonl") || p.file_name().unwrap() == "step2.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline_is_reproducible_and_complete() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&pipeline(&cfg, &a));
    assert_ok(&pipeline(&cfg, &b));
    for name in [
        "cases.jsonl",
        "splits.json",
        "sft_data.jsonl",
        "raw.json",
        "sft.json",
        "step1.json",
        "step2.json",
        "sft_loss.csv",
        "grpo1_metrics.csv",
        "grpo2_metrics.csv",
        "ablation.csv",
        "tone_distributions.csv",
        "tone_cases_step2.csv",
        "baseline.csv",
        "summary.json",
    ] {
        assert!(a.join(name).exists(), "missing {name}");
    }
    assert!(!a.join("FAILED").exists());
    assert_eq!(artifacts(&a), artifacts(&b));

    let ablation = fs::read_to_string(a.join("ablation.csv")).unwrap();
    // four checkpoints under two prompt modes
    assert_eq!(ablation.lines().count(), 1 + 8);
    assert!(ablation.starts_with("checkpoint,prompt_mode,accuracy,precision,recall,f1,"));
    let metrics = fs::read_to_string(a.join("grpo1_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_ok(&lexma(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]));
    assert_ok(&lexma(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--seed", "7"]));
    assert_ne!(fs::read(a.join("cases.jsonl")).unwrap(), fs::read(b.join("cases.jsonl")).unwrap());
}

#[test]
fn skipping_stage_one_keeps_sft_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "skip.json",
        r#"{
            "data": {"n_cases": 600, "sizes": {"sft": 100, "grpo1": 40, "grpo2": 20, "test": 40}},
            "grpo1": {"steps": 0},
            "grpo2": {"steps": 0}
        }"#,
    );
    let out = tmp.path().join("run");
    assert_ok(&pipeline(&cfg, &out));
    let (sft, _) = load_checkpoint(out.join("sft.json")).unwrap();
    let (step1, _) = load_checkpoint(out.join("step1.json")).unwrap();
    let (ws, w1) = (sft.effective_weights(), step1.effective_weights());
    assert_eq!(ws.shape(), w1.shape());
    assert!(ws.iter().zip(w1.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn staged_commands_match_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL);
    let c = cfg.to_str().unwrap();
    let (whole, staged) = (tmp.path().join("whole"), tmp.path().join("staged"));
    assert_ok(&pipeline(&cfg, &whole));
    let s = staged.to_str().unwrap();
    for cmd in ["gen-data", "sft", "grpo1", "grpo2", "eval"] {
        assert_ok(&lexma(&[cmd, "--config", c, "--out", s]));
    }
    for name in ["step2.json", "ablation.csv", "grpo2_metrics.csv", "tone_distributions.csv"] {
        assert_eq!(fs::read(whole.join(name)).unwrap(), fs::read(staged.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn failure_leaves_a_marker_until_a_clean_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL);
    let out = tmp.path().join("run");
    let o = lexma(&["grpo1", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    let marker = fs::read_to_string(out.join("FAILED")).unwrap();
    assert!(marker.contains("sft.json"), "marker: {marker}");
    assert_ok(&pipeline(&cfg, &out));
    assert!(!out.join("FAILED").exists());
}

#[test]
fn config_errors_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{"grpo1": {"stepz": 3}}"#);
    let o = pipeline(&bad, &tmp.path().join("run"));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("stepz"));
    assert!(!tmp.path().join("run").exists());

    let invalid = write(tmp.path(), "invalid.json", r#"{"grpo2": {"clip_eps": -1}}"#);
    assert!(!pipeline(&invalid, &tmp.path().join("run")).status.success());
}

#[test]
fn explain_is_deterministic_and_formatted() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "small.json", SMALL);
    let out = tmp.path().join("run");
    assert_ok(&pipeline(&cfg, &out));
    let case = write(
        tmp.path(),
        "case.json",
        r#"{"features": {"credit_score": 720, "dti_ratio": 28, "employment_years": 9, "income": 140,
            "interest_rate": 5.5, "loan_amount": 300, "ltv_ratio": 70, "property_value": 600}}"#,
    );
    let ckpt = out.join("step2.json");
    let args = ["explain", "--checkpoint", ckpt.to_str().unwrap(), "--case", case.to_str().unwrap()];
    let first = lexma(&args);
    assert_ok(&first);
    assert_eq!(first.stdout, lexma(&args).stdout);
    let text = String::from_utf8(first.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4, "{text}");
    assert!(lines[0] == "decision: APPROVE" || lines[0] == "decision: DENY");
    assert!(lines[1].starts_with("explanation: "));
    assert!(lines[2].starts_with("fk_grade: "));
    assert!(lines[3].starts_with("density: "));

    let mut expert = args.to_vec();
    expert.extend(["--mode", "expert"]);
    let text = String::from_utf8(lexma(&expert).stdout).unwrap();
    assert_eq!(text.lines().count(), 2, "{text}");

    let missing = write(tmp.path(), "missing.json", r#"{"features": {"income": 140}}"#);
    assert!(!lexma(&["explain", "--checkpoint", ckpt.to_str().unwrap(), "--case", missing.to_str().unwrap()])
        .status
        .success());
}

#[test]
fn score_reports_each_line_and_the_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let f = write(tmp.path(), "text.txt", "Thank you for your application.\n\nThe loan is good.\n");
    let o = lexma(&["score", f.to_str().unwrap()]);
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "line,fk_grade,density,r_read,r_polite");
    // 5 words, 8 syllables: 0.39·5 + 11.8·8/5 − 15.59
    let fk: f64 = lines[1].split(',').nth(1).unwrap().parse().unwrap();
    assert!((fk - 5.24).abs() < 1e-9, "{fk}");
    assert!(lines[1].starts_with("1,") && lines[1].ends_with(",0.4,1,1"), "{}", lines[1]);
    assert!(lines[2].starts_with("3,0,0,1,0"), "{}", lines[2]);
    assert!(lines[3].starts_with("mean,"));

    let empty = write(tmp.path(), "empty.txt", "\n\n");
    assert!(!lexma(&["score", empty.to_str().unwrap()]).status.success());
}
