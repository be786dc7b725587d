//! Class centroids and minimum-cost bipartite matching between the classes of
//! a source task and those of a target task.
//!
//! The matching relabels source samples so that a source class takes the
//! label of the target class whose centroid is closest under the optimal
//! one-to-one assignment. Among optimal assignments the lexicographically
//! smallest mapping is returned, so results never depend on solver internals.

use std::collections::BTreeMap;

use itertools::Itertools;
use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{encode, Batch, Network};

/// Reduced costs at or below `EDGE_TOL * (1 + max|c|)` count as tight.
const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub class_ids: Vec<usize>,
    /// One row per entry of `class_ids`.
    pub centroids: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `mapping[i]` is the target slot matched to source slot `i`.
    pub mapping: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn is_bijection(&self) -> bool {
        let mut seen = vec![false; self.mapping.len()];
        self.mapping.iter().all(|&j| j < seen.len() && !std::mem::replace(&mut seen[j], true))
    }

    /// Inverse permutation. Its `total_cost` is that of the transposed problem.
    pub fn inverse(&self) -> Assignment {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &j) in self.mapping.iter().enumerate() {
            inv[j] = i;
        }
        Assignment { mapping: inv, total_cost: self.total_cost }
    }
}

/// Mean embedding of each class present in `data`, classes in ascending id order.
pub fn class_centroids(net: &Network, data: &Batch) -> Result<CentroidSet> {
    let embeddings = encode(net, &data.features)?;
    centroids_of(&embeddings, &data.labels)
}

/// Per-class row means of precomputed embeddings.
pub fn centroids_of(embeddings: &Array2<f64>, labels: &[usize]) -> Result<CentroidSet> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimensionMismatch { expected: embeddings.nrows(), got: labels.len() });
    }
    let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (row, &label) in embeddings.rows().into_iter().zip(labels) {
        let entry = sums.entry(label).or_insert_with(|| (Array1::zeros(embeddings.ncols()), 0));
        entry.0 += &row;
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut centroids = Array2::zeros((sums.len(), embeddings.ncols()));
    let mut class_ids = Vec::with_capacity(sums.len());
    for (slot, (class, (sum, count))) in sums.into_iter().enumerate() {
        if count == 0 {
            return Err(Error::EmptyClass(class));
        }
        centroids.row_mut(slot).assign(&(sum / count as f64));
        class_ids.push(class);
    }
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite centroid".into()));
    }
    Ok(CentroidSet { class_ids, centroids })
}

fn euclidean(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `cost[i][j]` is the Euclidean distance between `a`'s centroid `i` and `b`'s centroid `j`.
pub fn cost_matrix(a: &CentroidSet, b: &CentroidSet) -> Result<Array2<f64>> {
    if a.centroids.dim() != b.centroids.dim() {
        return Err(Error::InvalidCostMatrix(format!(
            "centroid sets have shapes {:?} and {:?}",
            a.centroids.dim(),
            b.centroids.dim()
        )));
    }
    let n = a.centroids.nrows();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| euclidean(a.centroids.row(i), b.centroids.row(j))))
}

fn check_cost(cost: &Array2<f64>) -> Result<usize> {
    let (rows, cols) = cost.dim();
    if rows != cols {
        return Err(Error::InvalidCostMatrix(format!("{rows}x{cols} is not square")));
    }
    if rows == 0 {
        return Err(Error::InvalidCostMatrix("empty matrix".into()));
    }
    if cost.iter().any(|c| !c.is_finite() || *c < 0.0) {
        return Err(Error::InvalidCostMatrix("entries must be finite and nonnegative".into()));
    }
    Ok(rows)
}

fn tolerance(cost: &Array2<f64>) -> f64 {
    EDGE_TOL * (1.0 + cost.fold(0.0_f64, |m, &c| m.max(c)))
}

fn assignment_from(cost: &Array2<f64>, mapping: Vec<usize>) -> Assignment {
    let total_cost = mapping.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
    Assignment { mapping, total_cost }
}

/// Minimum-cost perfect matching (Hungarian method with potentials, O(n^3)).
pub fn hungarian(cost: &Array2<f64>) -> Result<Assignment> {
    let n = check_cost(cost)?;

    // Shortest augmenting path formulation; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1]; // owner[j]: row (1-based) matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0; n];
    let mut col_to_row = vec![0; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
        col_to_row[j - 1] = owner[j] - 1;
    }

    // Optimal assignments are exactly the perfect matchings on tight edges.
    let tol = tolerance(cost);
    let tight = |i: usize, j: usize| cost[[i, j]] - u[i + 1] - v[j + 1] <= tol;
    lexicographic_min(n, &tight, &mut row_to_col, &mut col_to_row);

    Ok(assignment_from(cost, row_to_col))
}

/// Rewrites a perfect matching on the `tight` graph into the
/// lexicographically smallest perfect matching of that graph.
///
/// Row `i` may take column `j` iff an alternating path through unfixed rows
/// leads from `j` back to row `i`'s current column; one BFS per row.
fn lexicographic_min(
    n: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_to_col: &mut [usize],
    col_to_row: &mut [usize],
) {
    let mut reachable = vec![false; n];
    let mut parent = vec![usize::MAX; n];
    let mut queue = Vec::with_capacity(n);
    for i in 0..n {
        let home = row_to_col[i];
        reachable.iter_mut().for_each(|r| *r = false);
        queue.clear();
        reachable[home] = true;
        queue.push(home);
        let mut head = 0;
        while head < queue.len() {
            let c = queue[head];
            head += 1;
            for r in i + 1..n {
                let rc = row_to_col[r];
                if !reachable[rc] && tight(r, c) {
                    reachable[rc] = true;
                    parent[rc] = c;
                    queue.push(rc);
                }
            }
        }
        let Some(best) = (0..n).find(|&j| reachable[j] && tight(i, j)) else {
            continue;
        };
        if best == home {
            continue;
        }
        let (mut row, mut col) = (i, best);
        loop {
            let displaced = col_to_row[col];
            row_to_col[row] = col;
            col_to_row[col] = row;
            if displaced == i {
                break;
            }
            row = displaced;
            col = parent[col];
        }
    }
}

/// Exhaustive search over all `n!` permutations in lexicographic order.
/// Ties within the same tolerance as [`hungarian`] go to the earliest
/// permutation. Limited to `n <= 8`.
pub fn brute_force_assignment(cost: &Array2<f64>) -> Result<Assignment> {
    let n = check_cost(cost)?;
    if n > 8 {
        return Err(Error::TooLarge(n));
    }
    let perms: Vec<(Vec<usize>, f64)> = (0..n)
        .permutations(n)
        .map(|p| {
            let c = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            (p, c)
        })
        .collect();
    let min = perms.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min);
    let slack = n as f64 * tolerance(cost);
    let (mapping, _) = perms.into_iter().find(|(_, c)| *c <= min + slack).expect("n >= 1");
    Ok(assignment_from(cost, mapping))
}

/// Replaces every label by `target_slot_order[assignment.mapping[slot]]`,
/// where `slot` is the label's position in `source_class_ids`.
pub fn remap_labels(
    data: &Batch,
    source_class_ids: &[usize],
    assignment: &Assignment,
    target_slot_order: &[usize],
) -> Result<Batch> {
    if assignment.mapping.len() != source_class_ids.len() || target_slot_order.len() != source_class_ids.len() {
        return Err(Error::DimensionMismatch { expected: source_class_ids.len(), got: assignment.mapping.len() });
    }
    let slot_of: BTreeMap<usize, usize> = source_class_ids.iter().enumerate().map(|(s, &c)| (c, s)).collect();
    let labels = data
        .labels
        .iter()
        .map(|l| {
            slot_of
                .get(l)
                .map(|&s| target_slot_order[assignment.mapping[s]])
                .ok_or(Error::UnknownLabel(*l))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch { features: data.features.clone(), labels })
}
