mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use task_affinity::config::{DataSource, FamilySplit, PipelineRunConfig, SynthRunConfig, TheoremRunConfig};
use task_affinity::pipeline::{rank_sources, RankedTask, RunReport, SelectionMode};
use task_affinity::tasks::{load_csv, make_synthetic};
use task_affinity::theorem::{ConvergenceExperiment, StepSchedule};
use tempfile::TempDir;

fn tas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tas")).args(args).output().unwrap()
}

fn write_config<T: serde::Serialize>(dir: &Path, name: &str, cfg: &T) -> String {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn pipeline_config() -> PipelineRunConfig {
    let mut b = common::small_bench();
    b.pipeline.s_count = 10;
    b.pipeline.finetune_schedule.epochs = 2;
    b.pipeline.n_eval_episodes = 40;
    PipelineRunConfig {
        data: DataSource::Synthetic {
            synthetic: b.synth,
            split: FamilySplit { test_family: b.test_family, train_per_family: b.train_per_family },
        },
        network: b.network,
        pipeline: b.pipeline,
        out_dir: None,
    }
}

fn theorem_config(abs_tol: f64) -> TheoremRunConfig {
    TheoremRunConfig {
        experiment: ConvergenceExperiment {
            dim: 3,
            n_train: 50,
            n_query: 30,
            n_support: 30,
            step_schedule: StepSchedule::Polynomial { eta0: 0.5, exponent: 0.6 },
            total_steps: 2000,
            n_seeds: 5,
            abs_tol,
            ..ConvergenceExperiment::default()
        },
        out_dir: None,
    }
}

fn read(path: PathBuf) -> String {
    std::fs::read_to_string(path).unwrap()
}

fn without_timings(text: &str) -> Value {
    let mut v: Value = serde_json::from_str(text).unwrap();
    v.as_object_mut().unwrap().remove("timings");
    v
}

fn out_arg(dir: &TempDir, sub: &str) -> (PathBuf, String) {
    let p = dir.path().join(sub);
    let s = p.to_str().unwrap().to_string();
    (p, s)
}

#[test]
fn synth_writes_deterministic_loadable_csv() {
    let dir = TempDir::new().unwrap();
    let synth = common::small_bench().synth;
    let cfg = SynthRunConfig { synthetic: synth.clone(), split: Some(FamilySplit { test_family: 1, train_per_family: 4 }), out_dir: None };
    let config = write_config(dir.path(), "synth.json", &cfg);
    let (a, a_s) = out_arg(&dir, "a");
    let (b, b_s) = out_arg(&dir, "b");
    let run = tas(&["synth", "--config", &config, "--out", &a_s]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.contains("960 rows, 24 classes, dimension 32"), "{stdout}");
    assert!(stdout.contains("train.csv: 640 rows, 16 classes"), "{stdout}");
    assert!(stdout.contains("test.csv: 80 rows, 2 classes"), "{stdout}");
    assert!(tas(&["synth", "--config", &config, "--out", &b_s]).status.success());
    for f in ["data.csv", "train.csv", "test.csv"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    assert_eq!(load_csv(a.join("data.csv")).unwrap(), make_synthetic(&synth).unwrap());
}

#[test]
fn seed_flag_reseeds_coherently() {
    let dir = TempDir::new().unwrap();
    let cfg = SynthRunConfig { synthetic: common::small_bench().synth, split: None, out_dir: None };
    let config = write_config(dir.path(), "synth.json", &cfg);
    let outs: Vec<PathBuf> = ["x", "y", "z"].iter().map(|s| dir.path().join(s)).collect();
    for (out, seed) in outs.iter().zip(["7", "7", "8"]) {
        assert!(tas(&["synth", "--config", &config, "--seed", seed, "--out", out.to_str().unwrap()]).status.success());
    }
    let data: Vec<String> = outs.iter().map(|o| read(o.join("data.csv"))).collect();
    assert_eq!(data[0], data[1]);
    assert_ne!(data[0], data[2]);
}

#[test]
fn tas_outputs_are_consistent_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", &pipeline_config());
    let (a, a_s) = out_arg(&dir, "a");
    let (b, b_s) = out_arg(&dir, "b");
    for out in [&a_s, &b_s] {
        let run = tas(&["tas", "--config", &config, "--out", out, "--jobs", "2"]);
        assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    }
    let scores = read(a.join("scores.json"));
    assert_eq!(without_timings(&scores), without_timings(&read(b.join("scores.json"))));
    for f in ["tas_hist.csv", "label_freq.csv", "whole.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let v: Value = serde_json::from_str(&scores).unwrap();
    let ranked: Vec<RankedTask> = serde_json::from_value(v["scores"].clone()).unwrap();
    let top: Vec<usize> = serde_json::from_value(v["top_tasks"].clone()).unwrap();
    assert_eq!(top, rank_sources(&ranked, 3).iter().map(|r| r.task_id).collect::<Vec<_>>());
    let counts: usize = read(a.join("tas_hist.csv")).lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 10);
    let freq: usize = read(a.join("label_freq.csv")).lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(freq, 3 * 3);
}

#[test]
fn fewshot_records_the_ablation_mode() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "run.json", &pipeline_config());
    let (a, a_s) = out_arg(&dir, "a");
    let run = tas(&["fewshot", "--config", &config, "--out", &a_s, "--ablation", "non_related"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let report: RunReport = serde_json::from_str(&read(a.join("report.json"))).unwrap();
    assert_eq!(report.mode, SelectionMode::NonRelated);
    assert!((0.0..=1.0).contains(&report.fewshot_accuracy_mean));
    assert!(report.fewshot_ci95 >= 0.0);
    assert_eq!(report.scores.len(), 10);
    assert!(a.join("tas_hist.csv").exists() && a.join("label_freq.csv").exists());
    assert!(!tas(&["fewshot", "--config", &config, "--out", &a_s, "--ablation", "bogus"]).status.success());
}

#[test]
fn theorem1_series_shape_and_exit_codes() {
    let dir = TempDir::new().unwrap();
    let pass = write_config(dir.path(), "t.json", &theorem_config(1.0));
    let (a, a_s) = out_arg(&dir, "a");
    let run = tas(&["theorem1", "--config", &pass, "--out", &a_s]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let verdict: Value = serde_json::from_str(&read(a.join("theorem1_verdict.json"))).unwrap();
    assert_eq!(verdict["report"]["pass"], Value::Bool(true));
    let checkpoints = verdict["report"]["trend"].as_array().unwrap().len();
    let series = read(a.join("theorem1_series.csv"));
    assert!(series.starts_with("seed,t,s_t,gap\n"));
    assert_eq!(series.lines().count() - 1, 5 * checkpoints);

    let fail = write_config(dir.path(), "f.json", &theorem_config(0.0));
    let (b, b_s) = out_arg(&dir, "b");
    let run = tas(&["theorem1", "--config", &fail, "--out", &b_s]);
    assert_eq!(run.status.code(), Some(3));
    let verdict: Value = serde_json::from_str(&read(b.join("theorem1_verdict.json"))).unwrap();
    assert_eq!(verdict["report"]["pass"], Value::Bool(false));
}

#[test]
fn bad_configs_fail_before_writing_anything() {
    let dir = TempDir::new().unwrap();
    let mut v = serde_json::to_value(pipeline_config()).unwrap();
    v["surprise"] = Value::from(1);
    let unknown = write_config(dir.path(), "unknown.json", &v);
    let mut cfg = pipeline_config();
    cfg.pipeline.top_r = 99;
    let invalid = write_config(dir.path(), "invalid.json", &cfg);
    for config in [unknown, invalid] {
        let (out, out_s) = out_arg(&dir, "never");
        let run = tas(&["tas", "--config", &config, "--out", &out_s]);
        assert_eq!(run.status.code(), Some(1));
        assert!(!out.exists());
    }
    let valid = write_config(dir.path(), "valid.json", &pipeline_config());
    assert_eq!(tas(&["tas", "--config", &valid]).status.code(), Some(1));
}
