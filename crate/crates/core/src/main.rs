use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use task_affinity::config::{self, PipelineRunConfig, RunConfig, SynthRunConfig, TheoremRunConfig};
use task_affinity::io::{label_frequency_csv, write_atomic, write_json};
use task_affinity::nnet::NetworkSpec;
use task_affinity::pipeline::{finish_run, rank_sources, run_affinity_phase, Histogram, PipelineConfig, RankedTask, SelectionMode};
use task_affinity::tasks::{csv_string, family_split, make_synthetic};
use task_affinity::theorem::{run_experiment, series_csv, ConvergenceExperiment, ConvergenceReport};
use task_affinity::{Error, Result};

/// Exit status when `theorem1` finishes but its verdict fails.
const VERDICT_FAILED: u8 = 3;

#[derive(Parser)]
#[command(name = "tas", version, about = "Task affinity scores and affinity-guided few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for source-task scoring and theorem seeds.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Progress and timings on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic family dataset as CSV.
    Synth(Common),
    /// Train the whole classifier and score every source task.
    Tas(Common),
    /// Full run: scoring, episodic fine-tuning and few-shot evaluation.
    Fewshot {
        #[command(flatten)]
        common: Common,
        /// related, non_related or random.
        #[arg(long, default_value = "related")]
        ablation: SelectionMode,
    },
    /// Convergence of the score along averaged SGD on a convex problem.
    Theorem1(Common),
}

fn prepare<T: RunConfig>(common: &Common) -> Result<(T, PathBuf)> {
    let mut cfg: T = config::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
        cfg.validate()?;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir().map(Path::to_path_buf))
        .ok_or_else(|| Error::InvalidConfig("no output directory: pass --out or set out_dir".into()))?;
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

fn cmd_synth(common: &Common) -> Result<()> {
    let (cfg, out) = prepare::<SynthRunConfig>(common)?;
    let data = make_synthetic(&cfg.synthetic)?;
    write_atomic(out.join("data.csv"), csv_string(&data).as_bytes())?;
    println!("data.csv: {} rows, {} classes, dimension {}", data.len(), data.n_classes(), data.dim());
    if let Some(split) = cfg.split {
        let (train, test) = family_split(&data, &cfg.synthetic, split.test_family, split.train_per_family)?;
        write_atomic(out.join("train.csv"), csv_string(&train).as_bytes())?;
        write_atomic(out.join("test.csv"), csv_string(&test).as_bytes())?;
        println!("train.csv: {} rows, {} classes", train.len(), train.n_classes());
        println!("test.csv: {} rows, {} classes", test.len(), test.n_classes());
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoresArtifact<'a> {
    network: &'a NetworkSpec,
    config: &'a PipelineConfig,
    /// Ascending task id.
    scores: &'a [RankedTask],
    /// The `top_r` closest task ids, closest first.
    top_tasks: Vec<usize>,
    tas_histogram: Histogram,
    label_frequency: BTreeMap<usize, usize>,
    timings: &'a BTreeMap<String, f64>,
}

fn cmd_tas(common: &Common, verbose: bool) -> Result<()> {
    let (cfg, out) = prepare::<PipelineRunConfig>(common)?;
    let (train, test) = cfg.data.load()?;
    let phase = run_affinity_phase(&train, &test, &cfg.network, &cfg.pipeline)?;
    let hist = phase.histogram(cfg.pipeline.hist_bins)?;
    let freq = phase.label_frequency(cfg.pipeline.top_r);
    let top = rank_sources(&phase.scores, cfg.pipeline.top_r);
    write_atomic(out.join("tas_hist.csv"), hist.to_csv().as_bytes())?;
    write_atomic(out.join("label_freq.csv"), label_frequency_csv(&freq).as_bytes())?;
    write_atomic(out.join("whole.json"), phase.whole.to_json()?.as_bytes())?;
    write_json(
        out.join("scores.json"),
        &ScoresArtifact {
            network: &cfg.network,
            config: &cfg.pipeline,
            scores: &phase.scores,
            top_tasks: top.iter().map(|r| r.task_id).collect(),
            tas_histogram: hist,
            label_frequency: freq,
            timings: &phase.timings,
        },
    )?;
    if verbose {
        eprintln!("timings: {:?}", phase.timings);
    }
    for r in &top {
        println!("task {:>4}  score {:.6}", r.task_id, r.score.value());
    }
    Ok(())
}

fn cmd_fewshot(common: &Common, mode: SelectionMode, verbose: bool) -> Result<()> {
    let (cfg, out) = prepare::<PipelineRunConfig>(common)?;
    let (train, test) = cfg.data.load()?;
    let phase = run_affinity_phase(&train, &test, &cfg.network, &cfg.pipeline)?;
    if verbose {
        eprintln!("scored {} source tasks", phase.scores.len());
    }
    let report = finish_run(&phase, &train, &test, &cfg.network, &cfg.pipeline, mode)?;
    write_atomic(out.join("tas_hist.csv"), report.tas_histogram.to_csv().as_bytes())?;
    write_atomic(out.join("label_freq.csv"), label_frequency_csv(&report.label_frequency).as_bytes())?;
    write_json(out.join("report.json"), &report)?;
    if verbose {
        eprintln!("timings: {:?}", report.timings);
    }
    println!(
        "{:?}: {} classes, baseline {:.4} ± {:.4}, fine-tuned {:.4} ± {:.4}",
        mode,
        report.selected_labels.labels.len(),
        report.baseline_accuracy_mean,
        report.baseline_ci95,
        report.fewshot_accuracy_mean,
        report.fewshot_ci95
    );
    Ok(())
}

#[derive(Serialize)]
struct Verdict<'a> {
    experiment: &'a ConvergenceExperiment,
    /// Score at the optimum, shared by all seeds.
    s_star: f64,
    report: &'a ConvergenceReport,
}

fn cmd_theorem1(common: &Common) -> Result<bool> {
    let (cfg, out) = prepare::<TheoremRunConfig>(common)?;
    let outcome = run_experiment(&cfg.experiment)?;
    write_atomic(out.join("theorem1_series.csv"), series_csv(&outcome.runs).as_bytes())?;
    let s_star = outcome.runs.first().map_or(f64::NAN, |r| r.s_star);
    write_json(
        out.join("theorem1_verdict.json"),
        &Verdict { experiment: &cfg.experiment, s_star, report: &outcome.report },
    )?;
    println!(
        "{}: median final gap {:.3e} (tolerance {:.1e})",
        if outcome.report.pass { "pass" } else { "fail" },
        outcome.report.final_gap_median,
        cfg.experiment.abs_tol
    );
    Ok(outcome.report.pass)
}

fn run(cli: &Cli) -> Result<bool> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(c) => cmd_synth(c).map(|_| true),
        Command::Tas(c) => cmd_tas(c, cli.verbose).map(|_| true),
        Command::Fewshot { common, ablation } => cmd_fewshot(common, *ablation, cli.verbose).map(|_| true),
        Command::Theorem1(c) => cmd_theorem1(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(VERDICT_FAILED),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
