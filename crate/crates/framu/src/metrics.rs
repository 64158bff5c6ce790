//! Quantitative evaluation of learning and unlearning.
//!
//! Model-facing metrics evaluate parameters with the attention gate fixed to
//! 1, so they reflect parameter change only, never score dynamics. The greedy
//! prediction of a model on a point is `max_a row(a) . features`.

use crate::error::{FramuError, Result};
use crate::model::{l2_distance, ParamVector};

/// Mean squared error between predictions and actuals.
pub fn mse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair("mse", pred, actual)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(actual.iter())
        .map(|(p, a)| (p - a) * (p - a))
        .sum::<f64>()
        / n)
}

/// Mean absolute error between predictions and actuals.
pub fn mae(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair("mae", pred, actual)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(actual.iter())
        .map(|(p, a)| (p - a).abs())
        .sum::<f64>()
        / n)
}

fn check_pair(context: &'static str, pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.is_empty() {
        return Err(FramuError::Domain {
            context,
            message: "empty input".into(),
        });
    }
    if pred.len() != actual.len() {
        return Err(FramuError::ShapeMismatch {
            context,
            expected: format!("{}", pred.len()),
            got: format!("{}", actual.len()),
        });
    }
    Ok(())
}

/// Per-action Q-value vector of a model on a feature vector, gate = 1.
pub fn q_vector(params: &ParamVector, features: &[f64]) -> Vec<f64> {
    (0..params.n_actions())
        .map(|a| {
            params
                .row(a)
                .iter()
                .zip(features.iter())
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect()
}

/// Greedy-value prediction: the best per-action Q-value.
pub fn greedy_value(params: &ParamVector, features: &[f64]) -> f64 {
    q_vector(params, features)
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Mean L2 distance between two models' per-action Q-vectors over a batch.
pub fn activation_distance<'a, I>(before: &ParamVector, after: &ParamVector, batch: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if !before.same_shape(after) {
        return Err(FramuError::ShapeMismatch {
            context: "activation_distance",
            expected: format!("{:?}", before.shape()),
            got: format!("{:?}", after.shape()),
        });
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for features in batch {
        let qa = q_vector(before, features);
        let qb = q_vector(after, features);
        total += l2_distance(&qa, &qb)?;
        n += 1;
    }
    if n == 0 {
        return Err(FramuError::Domain {
            context: "activation_distance",
            message: "empty batch".into(),
        });
    }
    Ok(total / n as f64)
}

/// Prediction MSE of a model's greedy values against stored targets. On a
/// forget set, a higher value after unlearning indicates stronger forgetting.
pub fn reconstruction_error<'a, I>(params: &ParamVector, batch: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], f64)>,
{
    let mut preds = Vec::new();
    let mut targets = Vec::new();
    for (features, target) in batch {
        preds.push(greedy_value(params, features));
        targets.push(target);
    }
    if preds.is_empty() {
        return Err(FramuError::Domain {
            context: "reconstruction_error",
            message: "empty forget set".into(),
        });
    }
    mse(&preds, &targets)
}

/// Paired before/after metrics for one unlearning event.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlearningReport {
    pub round: u32,
    pub n_forget: usize,
    pub mse_before: f64,
    pub mse_after: f64,
    pub mae_before: f64,
    pub mae_after: f64,
    /// Forget-set reconstruction error of the pre-unlearning model.
    pub re_before: f64,
    /// Forget-set reconstruction error of the post-unlearning model.
    pub re: f64,
    /// Retain-sample reconstruction error of the post-unlearning model,
    /// reported alongside `re` because the two directions of "better" differ.
    pub re_retain: f64,
    pub ad_forget: f64,
    pub ad_retain: f64,
}

impl UnlearningReport {
    /// A no-event placeholder where before and after coincide.
    pub fn no_event(round: u32, mse: f64, mae: f64) -> Self {
        UnlearningReport {
            round,
            n_forget: 0,
            mse_before: mse,
            mse_after: mse,
            mae_before: mae,
            mae_after: mae,
            re_before: 0.0,
            re: 0.0,
            re_retain: 0.0,
            ad_forget: 0.0,
            ad_retain: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(mse(&[3.0], &[0.0]).unwrap(), 9.0);
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(mae(&[-3.0], &[0.0]).unwrap(), 3.0);
    }

    #[test]
    fn activation_distance_identical_models_is_zero() {
        let m = ParamVector::from_values(vec![1.0, 2.0, 3.0, 4.0], 2, 2).unwrap();
        let feats = vec![vec![0.5, -1.0], vec![2.0, 0.0]];
        let batch = feats.iter().map(|f| f.as_slice());
        assert_eq!(activation_distance(&m, &m, batch).unwrap(), 0.0);
    }

    #[test]
    fn activation_distance_constant_shift_geometry() {
        // Models differing by +c in every Q output with 4 actions give
        // sqrt(4 c^2) = 2c. A bias-like feature fixed at 1 carries the shift.
        let c = 0.75;
        let before = ParamVector::from_values(vec![0.0; 4], 4, 1).unwrap();
        let after = ParamVector::from_values(vec![c; 4], 4, 1).unwrap();
        let feats = vec![vec![1.0]];
        let batch = feats.iter().map(|f| f.as_slice());
        let ad = activation_distance(&before, &after, batch).unwrap();
        assert!((ad - 2.0 * c).abs() < 1e-12);
    }

    #[test]
    fn activation_distance_hand_computed_zeroed_feature() {
        // One point [2, 3], model rows [[1, 1], [0, 2]]; zeroing feature 0
        // changes the Q-vector from [5, 6] to [3, 6], distance 2.
        let before = ParamVector::from_values(vec![1.0, 1.0, 0.0, 2.0], 2, 2).unwrap();
        let after = ParamVector::from_values(vec![0.0, 1.0, 0.0, 2.0], 2, 2).unwrap();
        let feats = vec![vec![2.0, 3.0]];
        let batch = feats.iter().map(|f| f.as_slice());
        let ad = activation_distance(&before, &after, batch).unwrap();
        assert!((ad - 2.0).abs() < 1e-12);
    }

    #[test]
    fn activation_distance_rejects_empty_batch() {
        let m = ParamVector::zeros(2, 2);
        let empty: Vec<Vec<f64>> = vec![];
        let batch = empty.iter().map(|f| f.as_slice());
        assert!(activation_distance(&m, &m, batch).is_err());
    }

    #[test]
    fn reconstruction_error_examples() {
        // An oracle on its own noiseless data reconstructs exactly.
        let oracle = ParamVector::from_values(vec![1.0, -1.0], 1, 2).unwrap();
        let feats = vec![vec![2.0, 1.0], vec![0.0, 3.0]];
        let batch = feats
            .iter()
            .map(|f| (f.as_slice(), greedy_value(&oracle, f)));
        assert_eq!(reconstruction_error(&oracle, batch).unwrap(), 0.0);

        // Zero model against targets all 2 gives 4.
        let zero = ParamVector::zeros(1, 2);
        let batch = feats.iter().map(|f| (f.as_slice(), 2.0));
        assert_eq!(reconstruction_error(&zero, batch).unwrap(), 4.0);

        let empty: Vec<Vec<f64>> = vec![];
        let batch = empty.iter().map(|f| (f.as_slice(), 0.0));
        assert!(reconstruction_error(&zero, batch).is_err());
    }

    #[test]
    fn greedy_value_takes_the_best_action() {
        let m = ParamVector::from_values(vec![1.0, 0.0, -1.0, 0.0, 0.5, 0.5], 3, 2).unwrap();
        assert_eq!(greedy_value(&m, &[2.0, 2.0]), 2.0);
    }
}
