//! Shared numeric types and vector arithmetic used by every other module.
//!
//! Model parameters are a single flat `f64` array in action-major layout
//! (one row per action, `n_features` columns). Keeping everything flat makes
//! federated averaging, mixing, and ledger arithmetic uniform, and the fixed
//! left-fold reduction order keeps runs bit-reproducible for a given seed.

use std::ops::Range;

use crate::error::{FramuError, Result};

/// Flat real-valued model parameters, one row of `n_features` coefficients
/// per action.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    n_actions: usize,
    n_features: usize,
}

impl ParamVector {
    /// All-zero parameters of the given shape.
    pub fn zeros(n_actions: usize, n_features: usize) -> Self {
        assert!(n_actions >= 1 && n_features >= 1, "degenerate shape");
        ParamVector {
            values: vec![0.0; n_actions * n_features],
            n_actions,
            n_features,
        }
    }

    pub fn from_values(values: Vec<f64>, n_actions: usize, n_features: usize) -> Result<Self> {
        if values.len() != n_actions * n_features {
            return Err(FramuError::ShapeMismatch {
                context: "ParamVector::from_values",
                expected: format!("{} values", n_actions * n_features),
                got: format!("{}", values.len()),
            });
        }
        let pv = ParamVector {
            values,
            n_actions,
            n_features,
        };
        pv.ensure_finite("ParamVector::from_values", 0)?;
        Ok(pv)
    }

    /// Single-action parameters; convenient for tests and plain regression.
    pub fn single_row(values: Vec<f64>) -> Self {
        let n = values.len();
        ParamVector {
            values,
            n_actions: 1,
            n_features: n,
        }
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_actions, self.n_features)
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.shape() == other.shape()
    }

    /// Row view for one action.
    pub fn row(&self, action: usize) -> &[f64] {
        let start = action * self.n_features;
        &self.values[start..start + self.n_features]
    }

    pub fn row_mut(&mut self, action: usize) -> &mut [f64] {
        let start = action * self.n_features;
        &mut self.values[start..start + self.n_features]
    }

    /// `self += c * other`, in place.
    pub fn add_scaled(&mut self, other: &ParamVector, c: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += c * b;
        }
    }

    pub fn add(&self, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        let mut out = self.clone();
        for v in out.values.iter_mut() {
            *v *= c;
        }
        out
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &'static str, round: u32) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(FramuError::Numeric { context, round })
        }
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Quality flags attached to a data point at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PointFlags {
    /// Round after which this point's label regime is stale (drift).
    pub outdated_after: Option<u32>,
    pub private: bool,
    pub irrelevant: bool,
}

/// One observation in an agent's stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DataPoint {
    pub id: u64,
    pub modality: usize,
    pub features: Vec<f64>,
    /// Ground-truth reward/label under the point's own regime.
    pub target: f64,
    pub flags: PointFlags,
    pub created_round: u32,
}

/// A contiguous block of the feature space belonging to one modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityDescriptor {
    pub index: usize,
    pub feature_range: Range<usize>,
}

/// Partition `[0, n_features)` into `m` contiguous modality ranges. The first
/// `n_features % m` ranges take one extra feature so the ranges always cover
/// the full index space exactly once.
pub fn modality_partition(n_features: usize, m: usize) -> Vec<ModalityDescriptor> {
    assert!(m >= 1 && n_features >= m, "need at least one feature per modality");
    let base = n_features / m;
    let extra = n_features % m;
    let mut out = Vec::with_capacity(m);
    let mut start = 0;
    for index in 0..m {
        let len = base + usize::from(index < extra);
        out.push(ModalityDescriptor {
            index,
            feature_range: start..start + len,
        });
        start += len;
    }
    out
}

/// Normalized weighted sum of vectors, `Σ (w_k / Σw) · v_k`, reduced in input
/// order (left fold). The shared kernel behind federated averaging and all
/// mixing operations.
pub fn weighted_sum(vectors: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    if vectors.is_empty() {
        return Err(FramuError::Domain {
            context: "weighted_sum",
            message: "no vectors given".into(),
        });
    }
    if vectors.len() != weights.len() {
        return Err(FramuError::ShapeMismatch {
            context: "weighted_sum",
            expected: format!("{} weights", vectors.len()),
            got: format!("{}", weights.len()),
        });
    }
    let shape = vectors[0].shape();
    for v in vectors {
        if v.shape() != shape {
            return Err(FramuError::ShapeMismatch {
                context: "weighted_sum",
                expected: format!("{:?}", shape),
                got: format!("{:?}", v.shape()),
            });
        }
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(FramuError::Domain {
            context: "weighted_sum",
            message: "weights must be finite and non-negative".into(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(FramuError::Domain {
            context: "weighted_sum",
            message: "weights sum to zero".into(),
        });
    }
    let mut acc = ParamVector::zeros(shape.0, shape.1);
    for (v, w) in vectors.iter().zip(weights.iter()) {
        acc.add_scaled(v, w / total);
    }
    Ok(acc)
}

/// Euclidean distance between two equal-length vectors.
pub fn l2_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FramuError::ShapeMismatch {
            context: "l2_distance",
            expected: format!("{}", a.len()),
            got: format!("{}", b.len()),
        });
    }
    Ok(a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_single_vector_identity() {
        let v = ParamVector::single_row(vec![1.0, 2.0]);
        let out = weighted_sum(&[v.clone()], &[1.0]).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn weighted_sum_equal_weight_mean() {
        let a = ParamVector::single_row(vec![1.0, 2.0]);
        let b = ParamVector::single_row(vec![3.0, 4.0]);
        let out = weighted_sum(&[a, b], &[1.0, 1.0]).unwrap();
        assert_eq!(out.values(), &[2.0, 3.0]);
    }

    #[test]
    fn weighted_sum_unequal_weights() {
        // (3*1 + 1*5) / 4 = 2
        let a = ParamVector::single_row(vec![1.0, 0.0]);
        let b = ParamVector::single_row(vec![5.0, 0.0]);
        let out = weighted_sum(&[a, b], &[3.0, 1.0]).unwrap();
        assert_eq!(out.values(), &[2.0, 0.0]);
    }

    #[test]
    fn weighted_sum_rejects_shape_mismatch() {
        let a = ParamVector::single_row(vec![1.0, 2.0]);
        let b = ParamVector::single_row(vec![1.0]);
        assert!(matches!(
            weighted_sum(&[a, b], &[1.0, 1.0]),
            Err(FramuError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn weighted_sum_rejects_zero_weights() {
        let a = ParamVector::single_row(vec![1.0]);
        assert!(matches!(
            weighted_sum(&[a], &[0.0]),
            Err(FramuError::Domain { .. })
        ));
    }

    #[test]
    fn l2_distance_345_triangle() {
        assert_eq!(l2_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
    }

    #[test]
    fn l2_distance_identity() {
        assert_eq!(l2_distance(&[7.0, 7.0], &[7.0, 7.0]).unwrap(), 0.0);
    }

    #[test]
    fn l2_distance_one_dim() {
        assert_eq!(l2_distance(&[1.0], &[4.0]).unwrap(), 3.0);
    }

    #[test]
    fn l2_distance_rejects_length_mismatch() {
        assert!(matches!(
            l2_distance(&[1.0], &[1.0, 2.0]),
            Err(FramuError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn modality_partition_covers_feature_space() {
        for (n, m) in [(20, 4), (7, 3), (5, 5), (9, 2)] {
            let parts = modality_partition(n, m);
            assert_eq!(parts.len(), m);
            let mut next = 0;
            for p in &parts {
                assert_eq!(p.feature_range.start, next);
                next = p.feature_range.end;
            }
            assert_eq!(next, n);
        }
    }

    #[test]
    fn row_views_use_action_major_layout() {
        let pv = ParamVector::from_values(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 3).unwrap();
        assert_eq!(pv.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(pv.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn from_values_rejects_non_finite() {
        assert!(ParamVector::from_values(vec![f64::NAN], 1, 1).is_err());
    }
}
