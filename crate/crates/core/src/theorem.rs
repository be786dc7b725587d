//! Convergence harness: affinity scores at Polyak-averaged noisy SGD iterates
//! of an L2-regularised logistic regression, compared with the score at the
//! exact optimum.
//!
//! The objective is `L(θ) = mean_i nll(x_i, y_i; θ) + λ‖θ‖²`, which satisfies
//! `L(θ') ≥ L(θ) + ∇L(θ)ᵀ(θ' − θ) + λ‖θ' − θ‖²`. The Fisher diagonals use the
//! unregularised per-sample gradient `(σ(xᵀθ) − y) x`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fisher::{normalize_unit_trace, tas, FisherDiagonal};
use crate::nnet::Batch;
use crate::rng::{derive_seed, seeded_rng, stream};

const DIVERGENCE_BOUND: f64 = 1e8;
const MAX_GD_ITERATIONS: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProblem {
    data: Batch,
    l2_lambda: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn check_binary(data: &Batch) -> Result<()> {
    match data.labels.iter().find(|&&y| y > 1) {
        Some(&label) => Err(Error::LabelOutOfRange { label, classes: 2 }),
        None => Ok(()),
    }
}

impl ConvexProblem {
    /// Labels must be 0 or 1.
    pub fn new(data: Batch, l2_lambda: f64) -> Result<Self> {
        if !(l2_lambda > 0.0 && l2_lambda.is_finite()) {
            return Err(Error::InvalidConfig("l2_lambda must be positive".into()));
        }
        check_binary(&data)?;
        Ok(Self { data, l2_lambda })
    }

    pub fn data(&self) -> &Batch {
        &self.data
    }

    pub fn l2_lambda(&self) -> f64 {
        self.l2_lambda
    }

    pub fn dim(&self) -> usize {
        self.data.features.ncols()
    }

    /// Constant `μ` of the strong-convexity inequality.
    pub fn strong_convexity(&self) -> f64 {
        self.l2_lambda
    }

    /// Upper bound on the gradient's Lipschitz constant.
    pub fn smoothness_bound(&self) -> f64 {
        let x = &self.data.features;
        0.25 * x.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64 + 2.0 * self.l2_lambda
    }

    pub fn loss(&self, theta: &[f64]) -> f64 {
        let theta = ArrayView1::from(theta);
        let z = self.data.features.dot(&theta);
        let nll: f64 = z
            .iter()
            .zip(&self.data.labels)
            .map(|(&z, &y)| softplus(z) - y as f64 * z)
            .sum::<f64>()
            / z.len() as f64;
        nll + self.l2_lambda * theta.dot(&theta)
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let theta = ArrayView1::from(theta);
        let x = &self.data.features;
        let n = x.nrows() as f64;
        let residual: Array1<f64> = x
            .dot(&theta)
            .iter()
            .zip(&self.data.labels)
            .map(|(&z, &y)| (sigmoid(z) - y as f64) / n)
            .collect();
        let g = x.t().dot(&residual) + &(&theta * (2.0 * self.l2_lambda));
        g.to_vec()
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Gradient descent with step `1 / smoothness_bound` until `‖∇L‖ < tol`.
pub fn solve_optimum(p: &ConvexProblem, tol: f64) -> Result<Vec<f64>> {
    solve_optimum_with_step(p, tol, 1.0 / p.smoothness_bound())
}

pub fn solve_optimum_with_step(p: &ConvexProblem, tol: f64, step: f64) -> Result<Vec<f64>> {
    if !(tol > 0.0 && step > 0.0) {
        return Err(Error::InvalidConfig("tolerance and step must be positive".into()));
    }
    let mut theta = vec![0.0; p.dim()];
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MAX_GD_ITERATIONS {
        let g = p.gradient(&theta);
        grad_norm = norm(&g);
        if grad_norm < tol {
            return Ok(theta);
        }
        for (t, gi) in theta.iter_mut().zip(&g) {
            *t -= step * gi;
        }
    }
    Err(Error::NoConvergence { iterations: MAX_GD_ITERATIONS, grad_norm })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StepSchedule {
    Constant { eta: f64 },
    /// `η_t = eta0 · t^(−exponent)` for `t = 1, 2, ...`
    Polynomial { eta0: f64, exponent: f64 },
}

impl StepSchedule {
    pub fn rate(&self, t: usize) -> f64 {
        match *self {
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Polynomial { eta0, exponent } => eta0 * (t as f64).powf(-exponent),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant { eta } => eta > 0.0 && eta.is_finite(),
            StepSchedule::Polynomial { eta0, exponent } => {
                eta0 > 0.0 && eta0.is_finite() && exponent > 0.5 && exponent < 1.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSchedule(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoisySGDConfig {
    pub step_schedule: StepSchedule,
    pub noise_sigma: f64,
    pub total_steps: usize,
    pub seed: u64,
}

impl NoisySGDConfig {
    pub fn validate(&self) -> Result<()> {
        self.step_schedule.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::InvalidConfig("total_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// `round(10^(k/10))` for `k = 0, 1, ...` below `total`, deduplicated, then
/// `total` itself. A grid point within half a grid step of `total` is dropped
/// so the final interval is never much shorter than the others.
pub fn log_checkpoints(total: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for k in 0.. {
        let t = 10f64.powf(k as f64 / 10.0).round() as usize;
        if t >= total || 10f64.powf((k as f64 + 0.5) / 10.0) > total as f64 {
            break;
        }
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    out.push(total);
    out
}

/// Polyak averages `θ̄_t` of noisy SGD iterates at [`log_checkpoints`] times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedPath {
    pub checkpoints: Vec<(usize, Vec<f64>)>,
}

/// `θ_{t+1} = θ_t − η_t (∇L(θ_t) + ε_t)` from `θ_0 = 0` with
/// `ε_t ~ N(0, σ² I)`; `θ̄_t` averages `θ_1, ..., θ_t`.
pub fn noisy_sgd(p: &ConvexProblem, cfg: &NoisySGDConfig) -> Result<AveragedPath> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let mut theta = vec![0.0; p.dim()];
    let mut avg = vec![0.0; p.dim()];
    let marks = log_checkpoints(cfg.total_steps);
    let mut next = 0;
    let mut checkpoints = Vec::with_capacity(marks.len());
    for t in 1..=cfg.total_steps {
        let eta = cfg.step_schedule.rate(t);
        let g = p.gradient(&theta);
        for (th, gi) in theta.iter_mut().zip(&g) {
            let noise: f64 = if cfg.noise_sigma > 0.0 { cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal) } else { 0.0 };
            *th -= eta * (gi + noise);
        }
        let n = norm(&theta);
        if n.is_nan() || n > DIVERGENCE_BOUND {
            return Err(Error::Diverged { step: t, norm: n });
        }
        for (a, th) in avg.iter_mut().zip(&theta) {
            *a += (th - *a) / t as f64;
        }
        if marks[next] == t {
            checkpoints.push((t, avg.clone()));
            next += 1;
        }
    }
    Ok(AveragedPath { checkpoints })
}

/// Unit-trace diagonal Fisher of the logistic model at `theta` on `data`.
pub fn logistic_fisher(theta: &[f64], data: &Batch) -> Result<FisherDiagonal> {
    check_binary(data)?;
    let x = &data.features;
    if theta.len() != x.ncols() {
        return Err(Error::DimensionMismatch { expected: x.ncols(), got: theta.len() });
    }
    let z = x.dot(&ArrayView1::from(theta));
    let mut entries = vec![0.0; theta.len()];
    for ((row, &zi), &y) in x.rows().into_iter().zip(&z).zip(&data.labels) {
        let r = sigmoid(zi) - y as f64;
        for (e, xi) in entries.iter_mut().zip(row) {
            let g = r * xi;
            *e += g * g;
        }
    }
    let n = x.nrows() as f64;
    entries.iter_mut().for_each(|e| *e /= n);
    normalize_unit_trace(&FisherDiagonal::new(entries)?)
}

pub fn score_at(theta: &[f64], a_query: &Batch, b_support: &Batch) -> Result<f64> {
    Ok(tas(&logistic_fisher(theta, a_query)?, &logistic_fisher(theta, b_support)?)?.value())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: usize,
    pub theta_bar: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub theta_star: Vec<f64>,
    pub s_star: f64,
}

impl Trajectory {
    pub fn gaps(&self) -> Vec<f64> {
        self.checkpoints.iter().map(|c| (c.score - self.s_star).abs()).collect()
    }
}

/// Scores every checkpoint of `path` and the optimum `theta_star`.
pub fn tas_trajectory(path: &AveragedPath, theta_star: &[f64], a_query: &Batch, b_support: &Batch) -> Result<Trajectory> {
    if path.checkpoints.is_empty() {
        return Err(Error::InvalidConfig("no checkpoints".into()));
    }
    let checkpoints = path
        .checkpoints
        .iter()
        .map(|(t, theta)| {
            Ok(Checkpoint { t: *t, theta_bar: theta.clone(), score: score_at(theta, a_query, b_support)? })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { checkpoints, theta_star: theta_star.to_vec(), s_star: score_at(theta_star, a_query, b_support)? })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub pass: bool,
    pub final_gap_median: f64,
    /// `(t, median over seeds of |s_t − s*|)` per checkpoint.
    pub trend: Vec<(usize, f64)>,
}

/// Pass iff the final median gap is below `abs_tol` and the median gap does
/// not increase over the last three checkpoints. Needs at least 5 runs
/// sharing the same checkpoint times.
pub fn convergence_check(runs: &[Trajectory], abs_tol: f64) -> Result<ConvergenceReport> {
    if runs.len() < 5 {
        return Err(Error::InsufficientData(format!("need at least 5 seeds, got {}", runs.len())));
    }
    let times: Vec<usize> = runs[0].checkpoints.iter().map(|c| c.t).collect();
    if times.is_empty() || runs.iter().any(|r| r.checkpoints.iter().map(|c| c.t).ne(times.iter().copied())) {
        return Err(Error::InvalidConfig("runs must share checkpoint times".into()));
    }
    let gaps: Vec<Vec<f64>> = runs.iter().map(Trajectory::gaps).collect();
    let trend: Vec<(usize, f64)> = times
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, median(&mut gaps.iter().map(|g| g[k]).collect::<Vec<_>>())))
        .collect();
    let final_gap_median = trend.last().expect("nonempty").1;
    let tail = &trend[trend.len().saturating_sub(3)..];
    let monotone = tail.windows(2).all(|w| w[1].1 <= w[0].1);
    Ok(ConvergenceReport { pass: final_gap_median < abs_tol && monotone, final_gap_median, trend })
}

/// Settings for the full multi-seed convergence experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceExperiment {
    pub dim: usize,
    pub n_train: usize,
    pub n_query: usize,
    pub n_support: usize,
    pub l2_lambda: f64,
    pub step_schedule: StepSchedule,
    pub noise_sigma: f64,
    pub total_steps: usize,
    pub n_seeds: usize,
    pub abs_tol: f64,
    pub optimum_tol: f64,
    pub seed: u64,
}

impl Default for ConvergenceExperiment {
    fn default() -> Self {
        Self {
            dim: 10,
            n_train: 200,
            n_query: 100,
            n_support: 100,
            l2_lambda: 0.1,
            step_schedule: StepSchedule::Polynomial { eta0: 0.5, exponent: 0.6 },
            noise_sigma: 0.1,
            total_steps: 100_000,
            n_seeds: 20,
            abs_tol: 1e-2,
            optimum_tol: 1e-10,
            seed: 0,
        }
    }
}

impl ConvergenceExperiment {
    fn sgd_config(&self, seed: u64) -> NoisySGDConfig {
        NoisySGDConfig {
            step_schedule: self.step_schedule,
            noise_sigma: self.noise_sigma,
            total_steps: self.total_steps,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_train == 0 || self.n_query == 0 || self.n_support == 0 {
            return Err(Error::InvalidConfig("sizes must be positive".into()));
        }
        if !(self.l2_lambda > 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::InvalidConfig("l2_lambda must be positive".into()));
        }
        if self.n_seeds < 5 {
            return Err(Error::InvalidConfig("n_seeds must be at least 5".into()));
        }
        if self.abs_tol.is_nan() || self.abs_tol < 0.0 || self.optimum_tol.is_nan() || self.optimum_tol <= 0.0 {
            return Err(Error::InvalidConfig("tolerances must be nonnegative, optimum_tol positive".into()));
        }
        self.sgd_config(self.seed).validate()
    }
}

/// Standard normal features with labels drawn from a logistic model with
/// weights `theta_true`.
pub fn sample_logistic(n: usize, theta_true: &[f64], rng: &mut impl Rng) -> Result<Batch> {
    let d = theta_true.len();
    let features = Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
    let z = features.dot(&ArrayView1::from(theta_true));
    let labels = z.iter().map(|&z| usize::from(rng.random::<f64>() < sigmoid(z))).collect();
    Batch::new(features, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub runs: Vec<Trajectory>,
    pub report: ConvergenceReport,
}

/// One problem, one pair of scoring sets, `n_seeds` independent noise
/// sequences. Training, source-query and target-support sets come from the
/// same generator.
pub fn run_experiment(cfg: &ConvergenceExperiment) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, stream::THEOREM));
    let theta_true: Vec<f64> = (0..cfg.dim).map(|_| rng.sample(StandardNormal)).collect();
    let train = sample_logistic(cfg.n_train, &theta_true, &mut rng)?;
    let a_query = sample_logistic(cfg.n_query, &theta_true, &mut rng)?;
    let b_support = sample_logistic(cfg.n_support, &theta_true, &mut rng)?;
    let problem = ConvexProblem::new(train, cfg.l2_lambda)?;
    let theta_star = solve_optimum(&problem, cfg.optimum_tol)?;
    let runs = (0..cfg.n_seeds)
        .into_par_iter()
        .map(|s| {
            let path = noisy_sgd(&problem, &cfg.sgd_config(derive_seed(cfg.seed, s as u64)))?;
            tas_trajectory(&path, &theta_star, &a_query, &b_support)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = convergence_check(&runs, cfg.abs_tol)?;
    Ok(ExperimentOutcome { runs, report })
}

/// `seed,t,s_t,gap` rows, one per run and checkpoint; `seed` is the run index.
pub fn series_csv(runs: &[Trajectory]) -> String {
    let mut out = String::from("seed,t,s_t,gap\n");
    for (seed, run) in runs.iter().enumerate() {
        for c in &run.checkpoints {
            out.push_str(&format!("{seed},{},{},{}\n", c.t, c.score, (c.score - run.s_star).abs()));
        }
    }
    out
}
