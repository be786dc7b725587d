//! Diagonal empirical Fisher information and the task affinity score.
//!
//! The affinity from a source task `a` to a target task `b` compares two
//! unit-trace diagonal Fisher matrices computed through the same network:
//! `F_aa` on the source's query data and `F_ab` on the target's support data.
//! For diagonal matrices the Fréchet form reduces to a scaled Hellinger-type
//! distance between the square-rooted diagonals, which lies in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{per_sample_grads, Batch, Network};

const NORMALIZED_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiagonal {
    entries: Vec<f64>,
    normalized: bool,
}

impl FisherDiagonal {
    /// Unnormalized diagonal. Entries must be finite and nonnegative.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::InvalidConfig("fisher entries must be finite and nonnegative".into()));
        }
        Ok(Self { entries, normalized: false })
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trace(&self) -> f64 {
        self.entries.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AffinityScore(pub f64);

impl AffinityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Entry `j` is the mean over samples of the squared `j`-th per-sample
/// gradient component.
pub fn empirical_fisher_diag(net: &Network, data: &Batch) -> Result<FisherDiagonal> {
    let grads = per_sample_grads(net, data)?;
    let mut entries = vec![0.0; net.param_count()];
    for g in &grads {
        for (e, gi) in entries.iter_mut().zip(g) {
            *e += gi * gi;
        }
    }
    let n = grads.len() as f64;
    entries.iter_mut().for_each(|e| *e /= n);
    Ok(FisherDiagonal { entries, normalized: false })
}

/// Scales the diagonal to unit trace. A zero trace is an error.
pub fn normalize_unit_trace(f: &FisherDiagonal) -> Result<FisherDiagonal> {
    let trace = f.trace();
    if trace.is_nan() || trace <= 0.0 {
        return Err(Error::ZeroFisher);
    }
    Ok(FisherDiagonal {
        entries: f.entries.iter().map(|e| e / trace).collect(),
        normalized: true,
    })
}

fn check_pair(a: &FisherDiagonal, b: &FisherDiagonal) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    for f in [a, b] {
        if !f.normalized || (f.trace() - 1.0).abs() > NORMALIZED_TOL {
            return Err(Error::NotNormalized);
        }
    }
    Ok(())
}

/// `s = (1/sqrt 2) * sqrt(sum_i (sqrt(f_aa[i]) - sqrt(f_ab[i]))^2)`.
pub fn tas(f_aa: &FisherDiagonal, f_ab: &FisherDiagonal) -> Result<AffinityScore> {
    check_pair(f_aa, f_ab)?;
    let sum: f64 = f_aa
        .entries
        .iter()
        .zip(&f_ab.entries)
        .map(|(a, b)| {
            let d = a.sqrt() - b.sqrt();
            d * d
        })
        .sum();
    Ok(AffinityScore(sum.sqrt() / std::f64::consts::SQRT_2))
}

/// The Fréchet trace form `(1/sqrt 2) * sqrt(tr(A + B - 2 (AB)^{1/2}))`
/// evaluated for diagonal `A`, `B`. Kept as an independent check on [`tas`].
pub fn frechet_diag_oracle(f_a: &FisherDiagonal, f_b: &FisherDiagonal) -> Result<AffinityScore> {
    check_pair(f_a, f_b)?;
    let trace: f64 = f_a
        .entries
        .iter()
        .zip(&f_b.entries)
        .map(|(a, b)| a + b - 2.0 * (a * b).sqrt())
        .sum();
    Ok(AffinityScore(trace.max(0.0).sqrt() / std::f64::consts::SQRT_2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{grad, init_network, Activation, NetworkSpec};
    use ndarray::array;

    fn normalized(v: &[f64]) -> FisherDiagonal {
        normalize_unit_trace(&FisherDiagonal::new(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn normalize_divides_by_trace() {
        let f = normalized(&[2.0, 3.0, 5.0]);
        for (a, b) in f.entries().iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(f.is_normalized());
        let again = normalize_unit_trace(&f).unwrap();
        for (a, b) in again.entries().iter().zip(f.entries()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_trace_is_an_error() {
        let f = FisherDiagonal::new(vec![0.0; 4]).unwrap();
        assert!(matches!(normalize_unit_trace(&f), Err(Error::ZeroFisher)));
    }

    #[test]
    fn negative_entries_rejected() {
        assert!(FisherDiagonal::new(vec![1.0, -0.5]).is_err());
    }

    #[test]
    fn tas_reference_values() {
        let e0 = normalized(&[1.0, 0.0]);
        let e1 = normalized(&[0.0, 1.0]);
        let half = normalized(&[0.5, 0.5]);
        assert_eq!(tas(&e0, &e0).unwrap().value(), 0.0);
        assert!((tas(&e0, &e1).unwrap().value() - 1.0).abs() < 1e-15);
        // (1/sqrt2) * sqrt((1 - sqrt .5)^2 + .5)
        let expected = 0.541_196_100_146_197;
        assert!((tas(&e0, &half).unwrap().value() - expected).abs() < 1e-12);
        assert!((frechet_diag_oracle(&e0, &e1).unwrap().value() - 1.0).abs() < 1e-15);
        assert_eq!(frechet_diag_oracle(&half, &half).unwrap().value(), 0.0);
    }

    #[test]
    fn tas_rejects_bad_inputs() {
        let a = normalized(&[1.0, 1.0]);
        let b = normalized(&[1.0, 1.0, 1.0]);
        assert!(matches!(tas(&a, &b), Err(Error::DimensionMismatch { .. })));
        let raw = FisherDiagonal::new(vec![0.5, 0.5]).unwrap();
        assert!(matches!(tas(&a, &raw), Err(Error::NotNormalized)));
    }

    #[test]
    fn single_sample_fisher_is_squared_gradient() {
        let spec = NetworkSpec::new(vec![3, 4], 3, Activation::Tanh).unwrap();
        let net = init_network(&spec, 3).unwrap();
        let batch = Batch::new(array![[0.3, -1.0, 2.0]], vec![2]).unwrap();
        let g = grad(&net, &batch).unwrap();
        let f = empirical_fisher_diag(&net, &batch).unwrap();
        for (e, gi) in f.entries().iter().zip(&g) {
            assert_eq!(*e, gi * gi);
        }
    }

    #[test]
    fn duplicated_batch_same_fisher() {
        let spec = NetworkSpec::new(vec![2, 3], 2, Activation::Relu).unwrap();
        let net = init_network(&spec, 8).unwrap();
        let batch = Batch::new(array![[0.3, -1.0], [1.0, 0.5], [-0.7, 0.2]], vec![0, 1, 1]).unwrap();
        let f1 = empirical_fisher_diag(&net, &batch).unwrap();
        let f2 = empirical_fisher_diag(&net, &batch.replicate(2)).unwrap();
        for (a, b) in f1.entries().iter().zip(f2.entries()) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
