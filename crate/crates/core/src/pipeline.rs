//! The three-phase few-shot pipeline.
//!
//! 1. Train one classifier on every training class.
//! 2. Score `S` random source tasks against the target task with the matched
//!    affinity score and keep the `R` closest ones.
//! 3. Fine-tune the encoder episodically on the classes of those tasks, then
//!    evaluate nearest-centroid few-shot accuracy on the test classes.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::ControlFlow;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fisher::{empirical_fisher_diag, normalize_unit_trace, tas, AffinityScore};
use crate::matching::{class_centroids, cost_matrix, hungarian, remap_labels, Assignment, CentroidSet};
use crate::nnet::{evaluate, init_network, log_sum_exp, replace_head, train, train_with, Batch, Network, NetworkSpec, TrainSchedule};
use crate::rng::{derive_seed, seeded_rng, stream};
use crate::tasks::{build_target_task, sample_episode, sample_episode_in, sample_source_tasks, Dataset, Episode, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub s_count: usize,
    pub n_test: usize,
    pub top_r: usize,
    pub m_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub epsilon: f64,
    pub whole_schedule: TrainSchedule,
    pub approx_schedule: TrainSchedule,
    /// `batch_size` counts episodes per update.
    pub finetune_schedule: TrainSchedule,
    pub n_eval_episodes: usize,
    pub softmax_temperature: f64,
    pub master_seed: u64,
    #[serde(default = "default_batches_per_epoch")]
    pub finetune_batches_per_epoch: usize,
    /// Labelled samples per test class forming the target task.
    #[serde(default = "default_target_shots")]
    pub target_shots: usize,
    #[serde(default = "default_hist_bins")]
    pub hist_bins: usize,
}

fn default_batches_per_epoch() -> usize {
    20
}

fn default_target_shots() -> usize {
    5
}

fn default_hist_bins() -> usize {
    20
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.s_count == 0 || self.top_r == 0 || self.top_r > self.s_count {
            return bad("need 1 <= top_r <= s_count");
        }
        if self.n_test < 2 {
            return bad("n_test must be at least 2");
        }
        if self.m_way == 0 || self.k_shot == 0 || self.q_query == 0 {
            return bad("episode sizes must be positive");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return bad("softmax_temperature must be positive");
        }
        if self.n_eval_episodes == 0 || self.finetune_batches_per_epoch == 0 || self.hist_bins == 0 {
            return bad("episode, batch and bin counts must be positive");
        }
        if self.target_shots < 2 {
            return bad("target_shots must be at least 2");
        }
        self.whole_schedule.validate()?;
        self.approx_schedule.validate()?;
        self.finetune_schedule.validate()
    }

    /// Sets the master seed and re-derives every schedule seed from it.
    pub fn reseed(&mut self, master: u64) {
        self.master_seed = master;
        self.whole_schedule.seed = derive_seed(master, stream::WHOLE);
        self.approx_schedule.seed = derive_seed(master, stream::APPROX);
        self.finetune_schedule.seed = derive_seed(master, stream::FINETUNE);
    }
}

/// Outcome of fitting one source task's approximation network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApproxRecord {
    pub query_accuracy: f64,
    pub epochs: usize,
    /// Whether `query_accuracy >= 1 - epsilon` was reached.
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTask {
    pub task_id: usize,
    pub score: AffinityScore,
    /// Source class slots (ascending class id) to target slots.
    pub assignment: Assignment,
    pub approx: ApproxRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedSet {
    pub label_set: BTreeSet<usize>,
    pub row_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Related,
    NonRelated,
    Random,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "related" => Ok(Self::Related),
            "non_related" => Ok(Self::NonRelated),
            "random" => Ok(Self::Random),
            _ => Err(Error::InvalidConfig(format!("unknown selection mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `counts.len() + 1` ascending edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]` of `values`; the maximum lands in
    /// the last bin.
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if values.is_empty() || bins == 0 {
            return Err(Error::InsufficientData("histogram needs values and bins".into()));
        }
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            hi = lo + 1.0;
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Ok(Self { edges, counts })
    }

    pub fn occupied_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// `bin_lo,bin_hi,count` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelatedSummary {
    pub labels: Vec<usize>,
    pub n_rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub mode: SelectionMode,
    pub network: NetworkSpec,
    pub config: PipelineConfig,
    /// One entry per source task, ascending task id.
    pub scores: Vec<RankedTask>,
    /// Task ids whose classes were used for fine-tuning, or empty for `random`.
    pub selected_tasks: Vec<usize>,
    pub selected_labels: RelatedSummary,
    pub tas_histogram: Histogram,
    /// Occurrences of each class among the `top_r` closest tasks.
    pub label_frequency: BTreeMap<usize, usize>,
    pub baseline_accuracy_mean: f64,
    pub baseline_ci95: f64,
    pub fewshot_accuracy_mean: f64,
    pub fewshot_ci95: f64,
    pub finetune_losses: Vec<f64>,
    pub timings: BTreeMap<String, f64>,
}

/// Maps class ids to dense labels `0..n` in ascending id order.
fn dense_batch(data: &Dataset) -> Result<Batch> {
    let slot: BTreeMap<usize, usize> = data.classes().into_iter().enumerate().map(|(i, c)| (c, i)).collect();
    Batch::new(data.features().clone(), data.labels().iter().map(|l| slot[l]).collect())
}

/// Trains `spec` on all training classes. Output `j` of the head is the
/// `j`-th smallest class id.
pub fn train_whole_classifier(train_set: &Dataset, spec: &NetworkSpec, schedule: &TrainSchedule) -> Result<Network> {
    if spec.head_classes != train_set.n_classes() {
        return Err(Error::InvalidConfig(format!(
            "head has {} classes but training set has {}",
            spec.head_classes,
            train_set.n_classes()
        )));
    }
    if spec.input_dim() != train_set.dim() {
        return Err(Error::DimensionMismatch { expected: spec.input_dim(), got: train_set.dim() });
    }
    let init = init_network(spec, derive_seed(schedule.seed, stream::WHOLE))?;
    Ok(train(&init, &dense_batch(train_set)?, schedule)?.0)
}

/// Copies `whole`'s encoder, attaches a fresh `n_test`-way head and trains on
/// `support` until accuracy on `query` reaches `1 - epsilon` or the epoch
/// budget runs out.
pub fn build_eps_approx(
    whole: &Network,
    task_id: usize,
    support: &Batch,
    query: &Batch,
    cfg: &PipelineConfig,
) -> Result<(Network, ApproxRecord)> {
    let seed = derive_seed(cfg.approx_schedule.seed, task_id as u64);
    let start = replace_head(whole, cfg.n_test, derive_seed(seed, stream::HEAD))?;
    let schedule = TrainSchedule { seed, ..cfg.approx_schedule.clone() };
    let mut record = ApproxRecord { query_accuracy: 0.0, epochs: 0, satisfied: false };
    let mut failure = None;
    let (net, _) = train_with(&start, support, &schedule, |epoch, net| {
        match evaluate(net, query) {
            Ok(acc) => {
                record = ApproxRecord { query_accuracy: acc, epochs: epoch + 1, satisfied: acc >= 1.0 - cfg.epsilon };
            }
            Err(e) => {
                failure = Some(e);
                return ControlFlow::Break(());
            }
        }
        if record.satisfied {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok((net, record)),
    }
}

/// The target task with its support batch (labels are target slots) and
/// class centroids under the whole classifier.
#[derive(Debug, Clone)]
pub struct TargetContext {
    pub task: TaskSpec,
    pub support: Batch,
    pub centroids: CentroidSet,
}

impl TargetContext {
    pub fn new(target_support: &Dataset, whole: &Network) -> Result<Self> {
        let task = build_target_task(target_support);
        let by_class = target_support.batch(&task.support_rows)?;
        let centroids = class_centroids(whole, &by_class)?;
        Ok(Self { support: dense_batch(target_support)?, task, centroids })
    }
}

/// Matched affinity of `source` (rows of `train_set`) to the target.
pub fn mtas(
    source: &TaskSpec,
    train_set: &Dataset,
    target: &TargetContext,
    whole: &Network,
    cfg: &PipelineConfig,
) -> Result<RankedTask> {
    let n = target.task.class_ids.len();
    if source.class_ids.len() != n || cfg.n_test != n {
        return Err(Error::InvalidConfig(format!(
            "source has {} classes, target {}, n_test {}",
            source.class_ids.len(),
            n,
            cfg.n_test
        )));
    }
    let all = train_set.batch(&source.all_rows())?;
    let source_centroids = class_centroids(whole, &all)?;
    let assignment = hungarian(&cost_matrix(&source_centroids, &target.centroids)?)?;
    let slots: Vec<usize> = (0..n).collect();
    let remap = |rows: &[usize]| -> Result<Batch> {
        remap_labels(&train_set.batch(rows)?, &source_centroids.class_ids, &assignment, &slots)
    };
    let support = remap(&source.support_rows)?;
    let query = remap(&source.query_rows)?;
    let (approx_net, approx) = build_eps_approx(whole, source.task_id, &support, &query, cfg)?;
    let f_aa = normalize_unit_trace(&empirical_fisher_diag(&approx_net, &query)?)?;
    let f_ab = normalize_unit_trace(&empirical_fisher_diag(&approx_net, &target.support)?)?;
    Ok(RankedTask { task_id: source.task_id, score: tas(&f_aa, &f_ab)?, assignment, approx })
}

/// Ascending by score, ties by task id; the first `top_r`.
pub fn rank_sources(scores: &[RankedTask], top_r: usize) -> Vec<RankedTask> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.score.0.total_cmp(&b.score.0).then(a.task_id.cmp(&b.task_id)));
    sorted.truncate(top_r);
    sorted
}

fn related_from_labels(label_set: BTreeSet<usize>, train_set: &Dataset) -> RelatedSet {
    let row_indices = (0..train_set.len()).filter(|&r| label_set.contains(&train_set.labels()[r])).collect();
    RelatedSet { label_set, row_indices }
}

/// Union of the chosen tasks' classes and every training row carrying one.
pub fn related_training_set(top: &[RankedTask], tasks: &[TaskSpec], train_set: &Dataset) -> Result<RelatedSet> {
    if top.is_empty() {
        return Err(Error::InsufficientData("no tasks selected".into()));
    }
    let by_id: BTreeMap<usize, &TaskSpec> = tasks.iter().map(|t| (t.task_id, t)).collect();
    let mut label_set = BTreeSet::new();
    for r in top {
        let task = by_id
            .get(&r.task_id)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown task id {}", r.task_id)))?;
        label_set.extend(task.class_ids.iter().copied());
    }
    Ok(related_from_labels(label_set, train_set))
}

/// Soft nearest-centroid loss on an episode's queries and its gradient
/// w.r.t. all parameters. Logits are `-‖q - c_j‖² / temperature`.
pub fn prototype_loss_grad(net: &Network, episode: &Episode, temperature: f64) -> Result<(f64, Vec<f64>)> {
    let m = episode.m_way;
    let ns = episode.support.len();
    let nq = episode.query.len();
    let mut features = Array2::zeros((ns + nq, net.spec().input_dim()));
    features.slice_mut(ndarray::s![..ns, ..]).assign(&episode.support.features);
    features.slice_mut(ndarray::s![ns.., ..]).assign(&episode.query.features);
    let pass = net.encoder_pass(&features)?;
    let emb = pass.embeddings();
    let dim = emb.ncols();

    let mut centroids = Array2::<f64>::zeros((m, dim));
    let mut counts = vec![0usize; m];
    for (row, &label) in episode.support.labels.iter().enumerate() {
        centroids.row_mut(label).scaled_add(1.0, &emb.row(row));
        counts[label] += 1;
    }
    if counts.contains(&0) {
        return Err(Error::EmptyClass(counts.iter().position(|&c| c == 0).unwrap_or(0)));
    }
    for (mut c, &k) in centroids.rows_mut().into_iter().zip(&counts) {
        c /= k as f64;
    }

    let mut d_emb = Array2::<f64>::zeros(emb.dim());
    let mut d_centroids = Array2::<f64>::zeros((m, dim));
    let mut total = 0.0;
    for (i, &label) in episode.query.labels.iter().enumerate() {
        let q = emb.row(ns + i);
        let diffs: Vec<_> = centroids.rows().into_iter().map(|c| &q - &c).collect();
        let logits: ndarray::Array1<f64> = diffs.iter().map(|d| -d.dot(d) / temperature).collect();
        let lse = log_sum_exp(logits.view());
        total += lse - logits[label];
        for (j, diff) in diffs.iter().enumerate() {
            let p = (logits[j] - lse).exp();
            let dl = (p - f64::from(u8::from(j == label))) / nq as f64;
            let scale = -2.0 * dl / temperature;
            d_emb.row_mut(ns + i).scaled_add(scale, diff);
            d_centroids.row_mut(j).scaled_add(-scale, diff);
        }
    }
    for (row, &label) in episode.support.labels.iter().enumerate() {
        d_emb.row_mut(row).scaled_add(1.0 / counts[label] as f64, &d_centroids.row(label));
    }
    Ok((total / nq as f64, pass.backward(&d_emb)?))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub net: Network,
    /// Mean episode loss per epoch.
    pub losses: Vec<f64>,
}

/// Episodic fine-tuning of the encoder on `related` rows only.
pub fn episodic_finetune(whole: &Network, related: &RelatedSet, train_set: &Dataset, cfg: &PipelineConfig) -> Result<FinetuneOutcome> {
    let schedule = &cfg.finetune_schedule;
    schedule.validate()?;
    let allowed: Vec<usize> = related.label_set.iter().copied().collect();
    let rows: BTreeSet<usize> = related.row_indices.iter().copied().collect();
    let mut net = whole.clone();
    let mut velocity = vec![0.0; net.param_count()];
    let mut losses = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let rate = schedule.rate_at(epoch);
        let mut epoch_loss = 0.0;
        for b in 0..cfg.finetune_batches_per_epoch {
            let step = (epoch * cfg.finetune_batches_per_epoch + b) as u64;
            let step_seed = derive_seed(schedule.seed, step);
            let mut g_acc = vec![0.0; net.param_count()];
            for e in 0..schedule.batch_size {
                let episode = sample_episode_in(
                    train_set,
                    &allowed,
                    cfg.m_way,
                    cfg.k_shot,
                    cfg.q_query,
                    derive_seed(step_seed, e as u64),
                )?;
                if let Some(r) = episode.support_rows.iter().chain(&episode.query_rows).find(|r| !rows.contains(r)) {
                    return Err(Error::InvalidDataset(format!("episode row {r} lies outside the related set")));
                }
                let (l, g) = prototype_loss_grad(&net, &episode, cfg.softmax_temperature)?;
                epoch_loss += l;
                for (a, gi) in g_acc.iter_mut().zip(&g) {
                    *a += gi / schedule.batch_size as f64;
                }
            }
            for ((p, v), g) in net.params_mut().iter_mut().zip(&mut velocity).zip(&g_acc) {
                *v = schedule.momentum * *v + g;
                *p -= rate * *v;
            }
        }
        if net.params().iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidSchedule(format!("parameters became non-finite in epoch {epoch}")));
        }
        losses.push(epoch_loss / (cfg.finetune_batches_per_epoch * schedule.batch_size) as f64);
    }
    Ok(FinetuneOutcome { net, losses })
}

/// Hard nearest-centroid accuracy on the episode's queries; distance ties go
/// to the lower label.
pub fn nearest_centroid_accuracy(net: &Network, episode: &Episode) -> Result<f64> {
    let support = crate::nnet::encode(net, &episode.support.features)?;
    let query = crate::nnet::encode(net, &episode.query.features)?;
    let centroids = crate::matching::centroids_of(&support, &episode.support.labels)?;
    let mut hits = 0;
    for (q, &label) in query.rows().into_iter().zip(&episode.query.labels) {
        let mut best = (f64::INFINITY, 0);
        for (slot, c) in centroids.centroids.rows().into_iter().enumerate() {
            let d = (&q - &c).mapv(|v| v * v).sum();
            if d < best.0 {
                best = (d, centroids.class_ids[slot]);
            }
        }
        hits += usize::from(best.1 == label);
    }
    Ok(hits as f64 / episode.query.len() as f64)
}

/// Mean and normal-approximation 95% half-width `1.96 · sd / sqrt(n)`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Few-shot accuracy over `n_eval_episodes` episodes of the test classes.
/// Episodes depend only on `master_seed`, so every network sees the same ones.
pub fn evaluate_fewshot(net: &Network, test: &Dataset, cfg: &PipelineConfig) -> Result<(f64, f64)> {
    let base = derive_seed(cfg.master_seed, stream::EVAL);
    let accs = (0..cfg.n_eval_episodes)
        .map(|e| {
            let episode = sample_episode(test, cfg.m_way, cfg.k_shot, cfg.q_query, derive_seed(base, e as u64))?;
            nearest_centroid_accuracy(net, &episode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_ci95(&accs))
}

/// Phases one and two: the whole classifier and every source task's score.
#[derive(Debug, Clone)]
pub struct AffinityPhase {
    pub whole: Network,
    pub tasks: Vec<TaskSpec>,
    pub target: TargetContext,
    /// Ascending task id.
    pub scores: Vec<RankedTask>,
    pub timings: BTreeMap<String, f64>,
}

impl AffinityPhase {
    pub fn histogram(&self, bins: usize) -> Result<Histogram> {
        Histogram::new(&self.scores.iter().map(|r| r.score.0).collect::<Vec<_>>(), bins)
    }

    /// How often each class appears among the `top_r` closest tasks.
    pub fn label_frequency(&self, top_r: usize) -> BTreeMap<usize, usize> {
        let mut freq = BTreeMap::new();
        for r in rank_sources(&self.scores, top_r) {
            for &c in &self.tasks[r.task_id].class_ids {
                *freq.entry(c).or_insert(0) += 1;
            }
        }
        freq
    }
}

fn elapsed(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

/// Trains the whole classifier, builds the target task from the first
/// `target_shots` samples of each test class and scores all source tasks.
pub fn run_affinity_phase(train_set: &Dataset, test: &Dataset, spec: &NetworkSpec, cfg: &PipelineConfig) -> Result<AffinityPhase> {
    cfg.validate()?;
    if test.n_classes() != cfg.n_test {
        return Err(Error::InvalidConfig(format!("test set has {} classes, n_test is {}", test.n_classes(), cfg.n_test)));
    }
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let whole = train_whole_classifier(train_set, spec, &cfg.whole_schedule)?;
    timings.insert("whole".to_string(), elapsed(t));

    let t = Instant::now();
    let target = TargetContext::new(&test.first_per_class(cfg.target_shots)?, &whole)?;
    let tasks = sample_source_tasks(train_set, cfg.s_count, cfg.n_test, derive_seed(cfg.master_seed, stream::SOURCES))?;
    let scores = tasks
        .par_iter()
        .map(|task| mtas(task, train_set, &target, &whole, cfg))
        .collect::<Result<Vec<_>>>()?;
    timings.insert("affinity".to_string(), elapsed(t));
    Ok(AffinityPhase { whole, tasks, target, scores, timings })
}

/// Classes for fine-tuning under `mode`, and the task ids they came from.
pub fn select_labels(phase: &AffinityPhase, train_set: &Dataset, cfg: &PipelineConfig, mode: SelectionMode) -> Result<(RelatedSet, Vec<usize>)> {
    let related = related_training_set(&rank_sources(&phase.scores, cfg.top_r), &phase.tasks, train_set)?;
    match mode {
        SelectionMode::Related => {
            let ids = rank_sources(&phase.scores, cfg.top_r).iter().map(|r| r.task_id).collect();
            Ok((related, ids))
        }
        SelectionMode::NonRelated => {
            let all = rank_sources(&phase.scores, phase.scores.len());
            let bottom = &all[all.len() - cfg.top_r..];
            Ok((related_training_set(bottom, &phase.tasks, train_set)?, bottom.iter().map(|r| r.task_id).collect()))
        }
        SelectionMode::Random => {
            let classes = train_set.classes();
            let mut rng = seeded_rng(derive_seed(cfg.master_seed, stream::RANDOM_LABELS));
            let labels = index::sample(&mut rng, classes.len(), related.label_set.len())
                .into_iter()
                .map(|i| classes[i])
                .collect();
            Ok((related_from_labels(labels, train_set), Vec::new()))
        }
    }
}

fn run_id(spec: &NetworkSpec, cfg: &PipelineConfig, mode: SelectionMode) -> Result<String> {
    let canonical = serde_json::to_vec(&(spec, cfg, mode))?;
    Ok(hex::encode(&Sha256::digest(&canonical)[..8]))
}

/// Phase three for `mode` on top of a finished affinity phase.
pub fn finish_run(
    phase: &AffinityPhase,
    train_set: &Dataset,
    test: &Dataset,
    spec: &NetworkSpec,
    cfg: &PipelineConfig,
    mode: SelectionMode,
) -> Result<RunReport> {
    let mut timings = phase.timings.clone();
    let (related, selected_tasks) = select_labels(phase, train_set, cfg, mode)?;

    let t = Instant::now();
    let tuned = episodic_finetune(&phase.whole, &related, train_set, cfg)?;
    timings.insert("finetune".to_string(), elapsed(t));

    let t = Instant::now();
    let (baseline_accuracy_mean, baseline_ci95) = evaluate_fewshot(&phase.whole, test, cfg)?;
    let (fewshot_accuracy_mean, fewshot_ci95) = evaluate_fewshot(&tuned.net, test, cfg)?;
    timings.insert("evaluate".to_string(), elapsed(t));

    Ok(RunReport {
        run_id: run_id(spec, cfg, mode)?,
        mode,
        network: spec.clone(),
        config: cfg.clone(),
        scores: phase.scores.clone(),
        selected_tasks,
        selected_labels: RelatedSummary {
            labels: related.label_set.iter().copied().collect(),
            n_rows: related.row_indices.len(),
        },
        tas_histogram: phase.histogram(cfg.hist_bins)?,
        label_frequency: phase.label_frequency(cfg.top_r),
        baseline_accuracy_mean,
        baseline_ci95,
        fewshot_accuracy_mean,
        fewshot_ci95,
        finetune_losses: tuned.losses,
        timings,
    })
}

pub fn ablation_run(train_set: &Dataset, test: &Dataset, spec: &NetworkSpec, cfg: &PipelineConfig, mode: SelectionMode) -> Result<RunReport> {
    let phase = run_affinity_phase(train_set, test, spec, cfg)?;
    finish_run(&phase, train_set, test, spec, cfg, mode)
}

pub fn run_full(train_set: &Dataset, test: &Dataset, spec: &NetworkSpec, cfg: &PipelineConfig) -> Result<RunReport> {
    ablation_run(train_set, test, spec, cfg, SelectionMode::Related)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{init_network, Activation};
    use crate::tasks::{make_synthetic, SyntheticConfig};

    fn synth() -> SyntheticConfig {
        SyntheticConfig {
            n_families: 2,
            classes_per_family: 4,
            samples_per_class: 12,
            input_dim: 5,
            family_spread: 4.0,
            class_spread: 1.5,
            noise_sigma: 0.3,
            seed: 5,
            class_subspace_dim: None,
        }
    }

    #[test]
    fn prototype_gradient_matches_finite_differences() {
        let data = make_synthetic(&synth()).unwrap();
        for (activation, seed) in [(Activation::Tanh, 1), (Activation::Relu, 2)] {
            let spec = NetworkSpec::new(vec![5, 6, 3], 8, activation).unwrap();
            let net = init_network(&spec, seed).unwrap();
            let episode = sample_episode(&data, 3, 2, 2, seed).unwrap();
            let (_, g) = prototype_loss_grad(&net, &episode, 0.7).unwrap();
            let h = 1e-6;
            for j in 0..spec.encoder_param_count() {
                let mut up = net.clone();
                up.params_mut()[j] += h;
                let mut dn = net.clone();
                dn.params_mut()[j] -= h;
                let fd = (prototype_loss_grad(&up, &episode, 0.7).unwrap().0
                    - prototype_loss_grad(&dn, &episode, 0.7).unwrap().0)
                    / (2.0 * h);
                let scale = g[j].abs().max(fd.abs()).max(1e-3);
                assert!((g[j] - fd).abs() / scale < 1e-5, "{activation:?} param {j}: {} vs {fd}", g[j]);
            }
            assert!(g[spec.encoder_param_count()..].iter().all(|&v| v == 0.0));
        }
    }
}
