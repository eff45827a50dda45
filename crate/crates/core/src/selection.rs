//! Class- and instance-level transferable probabilities and the
//! entropy-aware example weight.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Class transferable probability: one entry per source class, a point on
/// the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(w: Vec<f64>) -> Self {
        Self(w)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// All-ones weights, used wherever class selection is switched off.
    pub fn ones(k: usize) -> Self {
        Self(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> f64 {
        self.0[k]
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Rescaled so the largest entry is 1; the form used to weight losses.
    pub fn normalized_by_max(&self) -> ClassWeights {
        let m = self.0.iter().cloned().fold(0.0, f64::max);
        if m <= 0.0 {
            return ClassWeights::ones(self.0.len());
        }
        ClassWeights(self.0.iter().map(|v| v / m).collect())
    }

    pub fn l1_distance(&self, other: &ClassWeights) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Column means of the target prediction matrix.
pub fn class_transferable_probability(target_preds: &Tensor) -> Result<ClassWeights> {
    let n = target_preds.rows();
    let k = target_preds.cols();
    if target_preds.is_empty() || n == 0 {
        return invalid("cannot estimate class weights from an empty target set");
    }
    let mut w = vec![0.0; k];
    for i in 0..n {
        w.iter_mut()
            .zip(target_preds.row(i))
            .for_each(|(a, p)| *a += p);
    }
    w.iter_mut().for_each(|a| *a /= n as f64);
    Ok(ClassWeights(w))
}

/// Natural-log Shannon entropy, with `0 ln 0 = 0`.
pub fn entropy(pred: &[f64]) -> f64 {
    -pred
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `1 + exp(-H(pred))`: 2 for a one-hot row, `1 + 1/K` for a uniform row.
pub fn entropy_weight(pred: &[f64]) -> f64 {
    1.0 + (-entropy(pred)).exp()
}

/// The prediction row read as per-head alignment weights.
pub fn instance_weights(pred: &[f64]) -> Vec<f64> {
    pred.to_vec()
}

/// Diagnostics that require target labels. Training code never sees these.
pub mod oracle {
    use super::ClassWeights;
    use crate::error::{invalid, Result};

    /// Empirical frequency of each class among the target labels.
    pub fn true_class_weights(target_labels: &[usize], num_classes: usize) -> Result<ClassWeights> {
        if target_labels.is_empty() {
            return invalid("no target labels");
        }
        let mut w = vec![0.0; num_classes];
        for &y in target_labels {
            if y >= num_classes {
                return invalid(format!("label {y} out of range for {num_classes} classes"));
            }
            w[y] += 1.0;
        }
        let n = target_labels.len() as f64;
        w.iter_mut().for_each(|a| *a /= n);
        Ok(ClassWeights::new(w))
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::true_class_weights;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn preds(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn class_weight_examples() {
        let w = class_transferable_probability(&preds(&[&[0.25; 4], &[0.25; 4]])).unwrap();
        assert_eq!(w.as_slice(), &[0.25; 4]);
        let w = class_transferable_probability(&preds(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(w.as_slice(), &[0.5, 0.5]);
        let w = class_transferable_probability(&preds(&[&[0.9, 0.1], &[0.7, 0.3]])).unwrap();
        assert_abs_diff_eq!(w.get(0), 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(1), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn max_normalization() {
        let w = ClassWeights::new(vec![0.1, 0.6, 0.3]).normalized_by_max();
        assert_eq!(w.get(1), 1.0);
        assert_abs_diff_eq!(w.get(0), 1.0 / 6.0, epsilon = 1e-15);
        assert_eq!(ClassWeights::new(vec![0.0; 3]).normalized_by_max(), ClassWeights::ones(3));
    }

    #[test]
    fn true_weight_examples() {
        assert_eq!(true_class_weights(&[0, 0], 3).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(true_class_weights(&[0, 1], 3).unwrap().as_slice(), &[0.5, 0.5, 0.0]);
        assert_eq!(true_class_weights(&[0, 1, 2, 3], 4).unwrap().as_slice(), &[0.25; 4]);
        assert!(true_class_weights(&[3], 3).is_err());
        assert!(true_class_weights(&[], 3).is_err());
    }

    #[test]
    fn entropy_weight_examples() {
        assert_eq!(entropy_weight(&[0.0, 1.0, 0.0]), 2.0);
        assert_abs_diff_eq!(entropy_weight(&[0.5, 0.5]), 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(entropy_weight(&[0.25; 4]), 1.25, epsilon = 1e-15);
    }

    #[test]
    fn instance_weight_examples() {
        assert_eq!(instance_weights(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
        assert_eq!(instance_weights(&[1.0 / 3.0; 3]), vec![1.0 / 3.0; 3]);
        assert_eq!(instance_weights(&[0.7, 0.2, 0.1]), vec![0.7, 0.2, 0.1]);
    }

    fn simplex_rows(k: usize, n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, k), n).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum::<f64>() + 1e-12;
                    r.iter().map(|v| (v + 1e-12 / r.len() as f64) / s).collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn class_weights_are_on_simplex_and_permutation_equivariant(
            rows in simplex_rows(4, 7),
            perm in Just(vec![2usize, 0, 3, 1]),
        ) {
            let w = class_transferable_probability(&Tensor::from_rows(&rows).unwrap()).unwrap();
            prop_assert!((w.sum() - 1.0).abs() < 1e-9);
            prop_assert!(w.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let permuted: Vec<Vec<f64>> =
                rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
            let wp = class_transferable_probability(&Tensor::from_rows(&permuted).unwrap()).unwrap();
            for (i, &j) in perm.iter().enumerate() {
                prop_assert_eq!(wp.get(i), w.get(j));
            }
        }

        #[test]
        fn entropy_weight_bounds(row in simplex_rows(5, 1)) {
            let we = entropy_weight(&row[0]);
            prop_assert!(we >= 1.0 + 1.0 / 5.0 - 1e-12);
            prop_assert!(we <= 2.0);
        }

        #[test]
        fn one_hot_predictions_recover_true_weights(labels in proptest::collection::vec(0usize..4, 1..20)) {
            let rows: Vec<Vec<f64>> = labels
                .iter()
                .map(|&y| (0..4).map(|k| if k == y { 1.0 } else { 0.0 }).collect())
                .collect();
            let w = class_transferable_probability(&Tensor::from_rows(&rows).unwrap()).unwrap();
            prop_assert_eq!(w, true_class_weights(&labels, 4).unwrap());
        }
    }

    #[test]
    fn entropy_weight_extremes_are_exact() {
        for k in 1..8 {
            let uniform = vec![1.0 / k as f64; k];
            assert_abs_diff_eq!(entropy_weight(&uniform), 1.0 + 1.0 / k as f64, epsilon = 1e-12);
            let mut one_hot = vec![0.0; k];
            one_hot[k - 1] = 1.0;
            assert_eq!(entropy_weight(&one_hot), 2.0);
        }
    }
}
