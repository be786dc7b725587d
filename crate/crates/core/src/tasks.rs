//! Datasets, task construction and episode sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::Batch;
use crate::rng::{derive_seed, seeded_rng};

/// Fraction of each class's rows that go to a source task's support set.
pub const SUPPORT_FRACTION: f64 = 0.7;

/// Task id given to the target task.
pub const TARGET_TASK_ID: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_index: BTreeMap<usize, Vec<usize>>,
}

impl Dataset {
    /// Every class needs at least two samples so it can be split.
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidDataset("no rows".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::DimensionMismatch { expected: features.nrows(), got: labels.len() });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("non-finite feature".into()));
        }
        let mut class_index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            class_index.entry(label).or_default().push(row);
        }
        if let Some((class, _)) = class_index.iter().find(|(_, rows)| rows.len() < 2) {
            return Err(Error::InvalidDataset(format!("class {class} has fewer than 2 samples")));
        }
        Ok(Self { features, labels, class_index })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_index(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.class_index
    }

    pub fn classes(&self) -> Vec<usize> {
        self.class_index.keys().copied().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_index.len()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows of `class`, ascending.
    pub fn rows_of(&self, class: usize) -> &[usize] {
        self.class_index.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Batch of the given rows, labels left as class ids.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.len()) {
            return Err(Error::InvalidDataset(format!("row {bad} out of range")));
        }
        Batch::new(self.features.select(Axis(0), rows), rows.iter().map(|&r| self.labels[r]).collect())
    }

    /// Sub-dataset holding only `classes`, rows kept in their original order.
    pub fn select_classes(&self, classes: &[usize]) -> Result<Dataset> {
        let wanted: BTreeSet<usize> = classes.iter().copied().collect();
        let rows: Vec<usize> = (0..self.len()).filter(|&r| wanted.contains(&self.labels[r])).collect();
        Dataset::new(self.features.select(Axis(0), &rows), rows.iter().map(|&r| self.labels[r]).collect())
    }

    /// The first `per_class` rows (in row order) of every class.
    pub fn first_per_class(&self, per_class: usize) -> Result<Dataset> {
        let mut rows: Vec<usize> = self
            .class_index
            .values()
            .flat_map(|r| r.iter().take(per_class).copied())
            .collect();
        rows.sort_unstable();
        Dataset::new(self.features.select(Axis(0), &rows), rows.iter().map(|&r| self.labels[r]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    /// Ascending class ids.
    pub class_ids: Vec<usize>,
    /// Ascending row indices.
    pub support_rows: Vec<usize>,
    /// Ascending row indices; empty only for the target task.
    pub query_rows: Vec<usize>,
}

impl TaskSpec {
    /// Support and query rows, ascending.
    pub fn all_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.support_rows.iter().chain(&self.query_rows).copied().collect();
        rows.sort_unstable();
        rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub m_way: usize,
    pub k_shot: usize,
    /// `class_ids[j]` is the class relabelled as `j`.
    pub class_ids: Vec<usize>,
    /// Grouped by class: `k_shot` rows for label 0, then label 1, ...
    pub support: Batch,
    pub query: Batch,
    pub support_rows: Vec<usize>,
    pub query_rows: Vec<usize>,
}

/// Synthetic classes organised in families. Classes of one family sit close
/// together, so "related" has a known ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_families: usize,
    pub classes_per_family: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub family_spread: f64,
    pub class_spread: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// When set, class offsets within a family are drawn from a random
    /// subspace of this dimension shared by the family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_subspace_dim: Option<usize>,
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_families == 0 || self.classes_per_family == 0 || self.input_dim == 0 {
            return bad("family, class and dimension counts must be positive");
        }
        if self.samples_per_class < 2 {
            return bad("need at least 2 samples per class");
        }
        if !(self.family_spread > 0.0 && self.class_spread > 0.0 && self.noise_sigma > 0.0) {
            return bad("spreads and noise must be positive");
        }
        if self.class_spread >= self.family_spread {
            return bad("class_spread must be smaller than family_spread");
        }
        if let Some(k) = self.class_subspace_dim {
            if k == 0 || k > self.input_dim {
                return bad("class_subspace_dim must lie in [1, input_dim]");
            }
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.n_families * self.classes_per_family
    }

    pub fn family_of(&self, class: usize) -> usize {
        class / self.classes_per_family
    }

    /// Class ids of `family`.
    pub fn family_classes(&self, family: usize) -> Vec<usize> {
        (family * self.classes_per_family..(family + 1) * self.classes_per_family).collect()
    }
}

fn gaussian_vec(dim: usize, rng: &mut impl Rng) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let norm = v.dot(&v).sqrt();
    v / norm
}

/// Orthonormal basis (rows) of a random `k`-dimensional subspace.
fn random_basis(dim: usize, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut basis = Array2::zeros((k, dim));
    for i in 0..k {
        let mut v = gaussian_vec(dim, rng);
        for j in 0..i {
            let b = basis.row(j);
            let proj = v.dot(&b);
            v.scaled_add(-proj, &b);
        }
        basis.row_mut(i).assign(&unit(v));
    }
    basis
}

/// Class means and samples, class-major row order; class id of family `f`,
/// member `c` is `f * classes_per_family + c`.
pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let d = cfg.input_dim;
    let family_means: Vec<Array1<f64>> = (0..cfg.n_families)
        .map(|_| unit(gaussian_vec(d, &mut rng)) * cfg.family_spread)
        .collect();
    let mut class_means = Vec::with_capacity(cfg.n_classes());
    for mean in &family_means {
        let basis = cfg.class_subspace_dim.map(|k| random_basis(d, k, &mut rng));
        for _ in 0..cfg.classes_per_family {
            let dir = match &basis {
                Some(b) => gaussian_vec(b.nrows(), &mut rng).dot(b),
                None => gaussian_vec(d, &mut rng),
            };
            class_means.push(mean + &(unit(dir) * cfg.class_spread));
        }
    }
    let n = cfg.n_classes() * cfg.samples_per_class;
    let mut features = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    for (class, mean) in class_means.iter().enumerate() {
        for _ in 0..cfg.samples_per_class {
            let row = labels.len();
            let noise = gaussian_vec(d, &mut rng) * cfg.noise_sigma;
            features.row_mut(row).assign(&(mean + &noise));
            labels.push(class);
        }
    }
    Dataset::new(features, labels)
}

/// Splits a family dataset in two. The first `train_per_family` classes of
/// every family train; the remaining classes of `test_family` are the test set.
pub fn family_split(data: &Dataset, cfg: &SyntheticConfig, test_family: usize, train_per_family: usize) -> Result<(Dataset, Dataset)> {
    if test_family >= cfg.n_families || train_per_family == 0 || train_per_family >= cfg.classes_per_family {
        return Err(Error::InvalidConfig("family split out of range".into()));
    }
    let train: Vec<usize> = (0..cfg.n_families)
        .flat_map(|f| cfg.family_classes(f).into_iter().take(train_per_family))
        .collect();
    let test: Vec<usize> = cfg.family_classes(test_family).into_iter().skip(train_per_family).collect();
    Ok((data.select_classes(&train)?, data.select_classes(&test)?))
}

/// Reads `f0,...,f{d-1},label` CSV with a header line.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(&e, 1))?.clone();
    if header.iter().next_back() != Some("label") {
        return Err(Error::Csv { line: 1, message: "missing label column".into() });
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Csv { line: 1, message: "no feature columns".into() });
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(&e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != dim + 1 {
            return Err(Error::Csv { line, message: format!("expected {} fields, found {}", dim + 1, record.len()) });
        }
        for (col, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Csv { line, message: format!("column f{col}: non-numeric value {cell:?}") })?;
            values.push(v);
        }
        let label = record[dim]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Csv { line, message: format!("invalid label {:?}", &record[dim]) })?;
        labels.push(label);
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values).expect("row-major fill");
    Dataset::new(features, labels)
}

fn csv_error(e: &csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Csv { line, message: e.to_string() }
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(std::fs::File::open(path)?)
}

/// Features use 17 significant digits, which round-trips every `f64`.
pub fn write_csv<W: Write>(data: &Dataset, mut out: W) -> Result<()> {
    let header: Vec<String> = (0..data.dim()).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    writeln!(out, "{}", header.join(","))?;
    for (row, label) in data.features.rows().into_iter().zip(&data.labels) {
        let mut line = String::new();
        for v in row {
            line.push_str(&format!("{v:.16e},"));
        }
        line.push_str(&label.to_string());
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn csv_string(data: &Dataset) -> String {
    let mut buf = Vec::new();
    write_csv(data, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// `s_count` tasks of `n_test` classes each. Task `i` draws from its own
/// stream `derive_seed(seed, i)`, so tasks do not depend on each other.
pub fn sample_source_tasks(train: &Dataset, s_count: usize, n_test: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let classes = train.classes();
    if n_test > classes.len() || n_test == 0 {
        return Err(Error::InsufficientData(format!(
            "cannot draw {n_test} classes from {} training classes",
            classes.len()
        )));
    }
    (0..s_count)
        .map(|task_id| {
            let mut rng = seeded_rng(derive_seed(seed, task_id as u64));
            let mut class_ids: Vec<usize> =
                index::sample(&mut rng, classes.len(), n_test).into_iter().map(|i| classes[i]).collect();
            class_ids.sort_unstable();
            let mut support_rows = Vec::new();
            let mut query_rows = Vec::new();
            for &class in &class_ids {
                let mut rows = train.rows_of(class).to_vec();
                rows.shuffle(&mut rng);
                let n_support = ((rows.len() as f64 * SUPPORT_FRACTION).round() as usize).clamp(1, rows.len() - 1);
                support_rows.extend_from_slice(&rows[..n_support]);
                query_rows.extend_from_slice(&rows[n_support..]);
            }
            support_rows.sort_unstable();
            query_rows.sort_unstable();
            Ok(TaskSpec { task_id, class_ids, support_rows, query_rows })
        })
        .collect()
}

/// One task over every class of the test support set; all rows are support.
pub fn build_target_task(test_support: &Dataset) -> TaskSpec {
    TaskSpec {
        task_id: TARGET_TASK_ID,
        class_ids: test_support.classes(),
        support_rows: (0..test_support.len()).collect(),
        query_rows: Vec::new(),
    }
}

/// An `m`-way `k`-shot episode with `q` queries per class over all classes.
pub fn sample_episode(data: &Dataset, m: usize, k: usize, q: usize, seed: u64) -> Result<Episode> {
    sample_episode_in(data, &data.classes(), m, k, q, seed)
}

/// Like [`sample_episode`] but only classes in `allowed` are eligible.
pub fn sample_episode_in(data: &Dataset, allowed: &[usize], m: usize, k: usize, q: usize, seed: u64) -> Result<Episode> {
    if m == 0 || k == 0 || q == 0 {
        return Err(Error::InvalidConfig("episode sizes must be positive".into()));
    }
    let eligible: Vec<usize> = allowed.iter().copied().filter(|&c| data.rows_of(c).len() >= k + q).collect();
    if eligible.len() < m {
        return Err(Error::InsufficientData(format!(
            "{m}-way episode needs {m} classes with {} samples, found {}",
            k + q,
            eligible.len()
        )));
    }
    let mut rng = seeded_rng(seed);
    let class_ids: Vec<usize> = index::sample(&mut rng, eligible.len(), m).into_iter().map(|i| eligible[i]).collect();
    let mut support_rows = Vec::with_capacity(m * k);
    let mut query_rows = Vec::with_capacity(m * q);
    for &class in &class_ids {
        let rows = data.rows_of(class);
        let picked = index::sample(&mut rng, rows.len(), k + q);
        let picked: Vec<usize> = picked.into_iter().map(|i| rows[i]).collect();
        support_rows.extend_from_slice(&picked[..k]);
        query_rows.extend_from_slice(&picked[k..]);
    }
    let relabel = |rows: &[usize], per: usize| -> Result<Batch> {
        let labels = (0..m).flat_map(|j| std::iter::repeat_n(j, per)).collect();
        Batch::new(data.features.select(Axis(0), rows), labels)
    };
    Ok(Episode {
        m_way: m,
        k_shot: k,
        support: relabel(&support_rows, k)?,
        query: relabel(&query_rows, q)?,
        class_ids,
        support_rows,
        query_rows,
    })
}
