//! Auditor for the L1 estimation error of the class transferable probability.
//!
//! For target predictions `yhat_i` with true labels `y_i` in the shared class
//! set `C`, the estimation error satisfies, pointwise over the empirical
//! target set,
//!
//! ```text
//! |w* - w|_1 <= 2 mean(1 - max yhat) + 2 P(argmax yhat not in C)
//!             + 2 P(argmax_C yhat != y)                       (intermediate)
//!            <= ... + 2 E_src(h_C) + 2 d(p_C, q)             (full)
//! ```
//!
//! The first line holds exactly for any finite sample and is asserted. The
//! second line swaps the target error of the restricted classifier for its
//! source error plus a domain divergence. The divergence is only estimated
//! here (proxy domain classifier), so the full right-hand side is reported
//! but never asserted.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::argmax;
use crate::selection::{class_transferable_probability, oracle::true_class_weights};
use crate::tensor::Tensor;

/// Tolerance of the asserted intermediate inequality.
pub const BOUND_TOLERANCE: f64 = 1e-9;

/// Fixed budget of the proxy domain classifier.
pub const PROXY_STEPS: usize = 200;
pub const PROXY_LR: f64 = 0.1;
pub const PROXY_TRAIN_FRACTION: f64 = 0.8;

/// Every term of the bound at one checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub epoch: usize,
    pub delta_bar: f64,
    pub e_type1: f64,
    pub e_src_shared: f64,
    pub e_tgt_shared: f64,
    pub d_hdh_proxy: f64,
    pub w_error_l1: f64,
    pub rhs_intermediate: f64,
    pub rhs_full: f64,
}

/// Ground truth that only diagnostics may see: the shared class set and the
/// target labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleContext {
    pub shared_classes: Vec<usize>,
    pub target_labels: Vec<usize>,
}

impl OracleContext {
    pub fn new(shared_classes: Vec<usize>, target_labels: Vec<usize>) -> Self {
        Self {
            shared_classes,
            target_labels,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.shared_classes.is_empty() {
            return invalid("shared class set is empty");
        }
        if let Some(&c) = self.shared_classes.iter().find(|&&c| c >= num_classes) {
            return invalid(format!("shared class {c} out of range for {num_classes} classes"));
        }
        if let Some(&y) = self
            .target_labels
            .iter()
            .find(|y| !self.shared_classes.contains(y))
        {
            return invalid(format!("target label {y} is not in the shared class set"));
        }
        Ok(())
    }

    pub fn contains(&self, c: usize) -> bool {
        self.shared_classes.contains(&c)
    }
}

fn nonempty(preds: &Tensor) -> Result<()> {
    if preds.is_empty() {
        return invalid("empty prediction set");
    }
    Ok(())
}

/// Mean of `1 - max(row)`.
pub fn delta_bar(target_preds: &Tensor) -> Result<f64> {
    nonempty(target_preds)?;
    let n = target_preds.rows();
    let total: f64 = (0..n)
        .map(|i| {
            let row = target_preds.row(i);
            1.0 - row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / n as f64)
}

/// Fraction of rows whose argmax falls outside `shared`.
pub fn type1_error(target_preds: &Tensor, shared: &[usize]) -> Result<f64> {
    nonempty(target_preds)?;
    let n = target_preds.rows();
    let outside = (0..n)
        .filter(|&i| !shared.contains(&argmax(target_preds.row(i))))
        .count();
    Ok(outside as f64 / n as f64)
}

/// Argmax over the entries indexed by `shared`, lowest index on ties.
pub fn restricted_argmax(pred: &[f64], shared: &[usize]) -> Result<usize> {
    let mut sorted: Vec<usize> = shared.to_vec();
    sorted.sort_unstable();
    let Some(&first) = sorted.first() else {
        return invalid("shared class set is empty");
    };
    let mut best = first;
    for &c in &sorted[1..] {
        if pred[c] > pred[best] {
            best = c;
        }
    }
    Ok(best)
}

/// Error rate of the restricted classifier on samples whose labels all lie
/// in `shared`.
pub fn shared_error(preds: &Tensor, labels: &[usize], shared: &[usize]) -> Result<f64> {
    nonempty(preds)?;
    if labels.len() != preds.rows() {
        return invalid("predictions and labels differ in length");
    }
    let mut wrong = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if !shared.contains(&y) {
            return invalid(format!("label {y} is outside the shared class set"));
        }
        if restricted_argmax(preds.row(i), shared)? != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / labels.len() as f64)
}

/// Proxy divergence `max(0, 2 (1 - 2 err))`, where `err` is the held-out
/// error of a logistic domain classifier trained on standardized features.
pub fn estimate_hdh_divergence<R: Rng>(source: &Tensor, target: &Tensor, rng: &mut R) -> Result<f64> {
    let (ns, nt) = (source.rows(), target.rows());
    if source.is_empty() || target.is_empty() {
        return invalid("divergence needs two nonempty feature sets");
    }
    let d = source.cols();
    if target.cols() != d {
        return invalid("feature widths differ");
    }
    let n = ns + nt;
    let n_train = (n as f64 * PROXY_TRAIN_FRACTION).floor() as usize;
    if n_train < 2 || n - n_train < 1 {
        return invalid(format!("{n} samples are too few for a train/held-out split"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let sample = |i: usize| -> (&[f64], f64) {
        if i < ns {
            (source.row(i), 1.0)
        } else {
            (target.row(i - ns), 0.0)
        }
    };
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(sample(i).0).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    let mut std = vec![0.0; d];
    for &i in train {
        std.iter_mut()
            .zip(sample(i).0.iter().zip(&mean))
            .for_each(|(s, (x, m))| *s += (x - m).powi(2));
    }
    std.iter_mut().for_each(|s| {
        *s = (*s / n_train as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    });
    let standardize = |x: &[f64]| -> Vec<f64> {
        x.iter()
            .zip(mean.iter().zip(&std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    };
    let train_x: Vec<(Vec<f64>, f64)> = train
        .iter()
        .map(|&i| {
            let (x, y) = sample(i);
            (standardize(x), y)
        })
        .collect();

    let mut weights = vec![0.0; d];
    let mut bias = 0.0;
    let logit = |w: &[f64], b: f64, x: &[f64]| b + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
    for _ in 0..PROXY_STEPS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train_x {
            let p = 1.0 / (1.0 + (-logit(&weights, bias, x)).exp());
            let r = p - y;
            gw.iter_mut().zip(x).for_each(|(g, x)| *g += r * x);
            gb += r;
        }
        let scale = PROXY_LR / train_x.len() as f64;
        weights.iter_mut().zip(&gw).for_each(|(w, g)| *w -= scale * g);
        bias -= scale * gb;
    }
    let errors = test
        .iter()
        .filter(|&&i| {
            let (x, y) = sample(i);
            let predicted_source = logit(&weights, bias, &standardize(x)) > 0.0;
            predicted_source != (y == 1.0)
        })
        .count();
    let err = errors as f64 / test.len() as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).max(0.0))
}

/// Inputs of [`check_bound`] beyond the target predictions.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs<'a> {
    pub target_preds: &'a Tensor,
    pub target_features: &'a Tensor,
    pub source_preds: &'a Tensor,
    pub source_features: &'a Tensor,
    pub source_labels: &'a [usize],
    pub epoch: usize,
}

fn select_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let data: Vec<Vec<f64>> = rows.iter().map(|&i| t.row(i).to_vec()).collect();
    Ok(Tensor::from_rows(&data)?)
}

/// Computes every bound term and asserts the intermediate inequality.
pub fn check_bound<R: Rng>(inputs: BoundInputs<'_>, oracle: &OracleContext, rng: &mut R) -> Result<BoundReport> {
    let k = inputs.target_preds.cols();
    oracle.validate(k)?;
    if oracle.target_labels.len() != inputs.target_preds.rows() {
        return invalid("oracle labels and target predictions differ in length");
    }
    let shared = &oracle.shared_classes;
    let w = class_transferable_probability(inputs.target_preds)?;
    let w_true = true_class_weights(&oracle.target_labels, k)?;
    let w_error_l1 = w_true.l1_distance(&w);
    let delta_bar = delta_bar(inputs.target_preds)?;
    let e_type1 = type1_error(inputs.target_preds, shared)?;
    let e_tgt_shared = shared_error(inputs.target_preds, &oracle.target_labels, shared)?;

    let src_rows: Vec<usize> = (0..inputs.source_labels.len())
        .filter(|&i| oracle.contains(inputs.source_labels[i]))
        .collect();
    if src_rows.is_empty() {
        return invalid("no source samples in the shared class set");
    }
    let src_preds = select_rows(inputs.source_preds, &src_rows)?;
    let src_labels: Vec<usize> = src_rows.iter().map(|&i| inputs.source_labels[i]).collect();
    let e_src_shared = shared_error(&src_preds, &src_labels, shared)?;
    let src_feats = select_rows(inputs.source_features, &src_rows)?;
    let d_hdh_proxy = estimate_hdh_divergence(&src_feats, inputs.target_features, rng)?;

    let rhs_intermediate = 2.0 * delta_bar + 2.0 * e_type1 + 2.0 * e_tgt_shared;
    let rhs_full = 2.0 * delta_bar + 2.0 * e_type1 + 2.0 * e_src_shared + 2.0 * d_hdh_proxy;
    if w_error_l1 > rhs_intermediate + BOUND_TOLERANCE {
        return Err(Error::BoundViolation {
            epoch: inputs.epoch,
            lhs: w_error_l1,
            rhs: rhs_intermediate,
        });
    }
    Ok(BoundReport {
        epoch: inputs.epoch,
        delta_bar,
        e_type1,
        e_src_shared,
        e_tgt_shared,
        d_hdh_proxy,
        w_error_l1,
        rhs_intermediate,
        rhs_full,
    })
}

/// The target-side terms only: `(w_error_l1, rhs_intermediate)`. Used by the
/// property checks, which need no features.
pub fn intermediate_terms(target_preds: &Tensor, oracle: &OracleContext) -> Result<(f64, f64)> {
    let k = target_preds.cols();
    oracle.validate(k)?;
    let w = class_transferable_probability(target_preds)?;
    let w_true = true_class_weights(&oracle.target_labels, k)?;
    let rhs = 2.0 * delta_bar(target_preds)?
        + 2.0 * type1_error(target_preds, &oracle.shared_classes)?
        + 2.0 * shared_error(target_preds, &oracle.target_labels, &oracle.shared_classes)?;
    Ok((w_true.l1_distance(&w), rhs))
}
