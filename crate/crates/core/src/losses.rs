//! Selective supervised loss, class-selective self-training, the weighted
//! multi-head adversarial loss, and their composition.
//!
//! Each loss comes in two forms: a tape version used for training and a plain
//! numeric version over prediction rows. The numeric forms back the checks
//! in tests and diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::selection::{entropy, entropy_weight, ClassWeights};
use crate::tensor::{cross_entropy_row, Label, Tape, Tensor, Var, LOG_FLOOR};

/// Per-step (or per-epoch averaged) loss values.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup: f64,
    pub l_self: f64,
    pub l_adv: f64,
    pub objective: f64,
}

impl LossBreakdown {
    /// Builds the record with `objective = l_sup + l_self - l_adv`.
    pub fn new(l_sup: f64, l_self: f64, l_adv: f64) -> Self {
        Self {
            l_sup,
            l_self,
            l_adv,
            objective: l_sup + l_self - l_adv,
        }
    }

    /// Component-wise mean, objective recomputed from the means.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        if items.is_empty() {
            return Self::default();
        }
        let n = items.len() as f64;
        Self::new(
            items.iter().map(|b| b.l_sup).sum::<f64>() / n,
            items.iter().map(|b| b.l_self).sum::<f64>() / n,
            items.iter().map(|b| b.l_adv).sum::<f64>() / n,
        )
    }
}

/// Hard pseudo-labels (argmax, lowest index on ties) with the soft rows kept
/// for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub hard: Vec<usize>,
    pub soft: Vec<Vec<f64>>,
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn assign_pseudo_labels(preds: &Tensor) -> PseudoLabels {
    let soft = preds.to_rows();
    PseudoLabels {
        hard: soft.iter().map(|r| argmax(r)).collect(),
        soft,
    }
}

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return invalid(format!("label {y} out of range for {k} classes"));
    }
    Ok(())
}

/// `mean_i w[y_i] * ce(pred_i, y_i)` over prediction rows.
pub fn supervised_loss(preds: &[Vec<f64>], labels: &[usize], w: &ClassWeights) -> Result<f64> {
    if preds.is_empty() {
        return invalid("empty batch");
    }
    if preds.len() != labels.len() {
        return invalid("predictions and labels differ in length");
    }
    let mut total = 0.0;
    for (p, &y) in preds.iter().zip(labels) {
        check_labels(&[y], w.len())?;
        total += w.get(y) * cross_entropy_row(p, Label::Hard(y))?;
    }
    Ok(total / preds.len() as f64)
}

/// Class-selective self-training loss; 0 when the gate is closed.
pub fn self_training_loss(
    preds: &[Vec<f64>],
    pseudo: &[usize],
    w: &ClassWeights,
    enabled: bool,
) -> Result<f64> {
    if !enabled {
        return Ok(0.0);
    }
    supervised_loss(preds, pseudo, w)
}

/// Gates of the adversarial loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdversarialGates {
    pub instance_sel: bool,
    pub class_sel: bool,
    pub entropy_weight: bool,
}

/// Per-sample, per-head constant weight of the adversarial loss:
/// `[w_k] * [w_e(x)] * [yhat_k]`, each factor replaced by 1 when gated off.
/// A single head (plain domain discriminator) only takes the entropy factor.
pub fn adversarial_weights(
    class_preds: &[Vec<f64>],
    heads: usize,
    w: &ClassWeights,
    gates: AdversarialGates,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(class_preds.len() * heads);
    for row in class_preds {
        let we = if gates.entropy_weight { entropy_weight(row) } else { 1.0 };
        if heads == 1 {
            out.push(we);
            continue;
        }
        if row.len() != heads || w.len() != heads {
            return invalid("a multi-head discriminator needs one head per class");
        }
        for (k, &yk) in row.iter().enumerate() {
            let mut v = we;
            if gates.class_sel {
                v *= w.get(k);
            }
            if gates.instance_sel {
                v *= yk;
            }
            out.push(v);
        }
    }
    Ok(out)
}

fn bce(p: f64, d: f64) -> f64 {
    -(d * p.max(LOG_FLOOR).ln() + (1.0 - d) * (1.0 - p).max(LOG_FLOOR).ln())
}

/// `sum_k mean_i weight(i,k) * bce(D^k(x_i), d_i)` from per-head source
/// probabilities.
pub fn adversarial_loss(
    domain_preds: &[Vec<f64>],
    class_preds: &[Vec<f64>],
    domains: &[f64],
    w: &ClassWeights,
    gates: AdversarialGates,
) -> Result<f64> {
    let m = domain_preds.len();
    if m == 0 || class_preds.len() != m || domains.len() != m {
        return invalid("adversarial loss inputs are misaligned");
    }
    let heads = domain_preds[0].len();
    let weights = adversarial_weights(class_preds, heads, w, gates)?;
    let mut total = 0.0;
    for (i, row) in domain_preds.iter().enumerate() {
        if row.len() != heads {
            return invalid("ragged discriminator output");
        }
        for (k, &p) in row.iter().enumerate() {
            total += weights[i * heads + k] * bce(p, domains[i]);
        }
    }
    Ok(total / m as f64)
}

/// Mean Shannon entropy of prediction rows.
pub fn mean_entropy(preds: &[Vec<f64>]) -> f64 {
    preds.iter().map(|r| entropy(r)).sum::<f64>() / preds.len().max(1) as f64
}

/// Tape version of [`supervised_loss`] (also used for self-training with
/// pseudo-labels). The weights enter as constants.
pub fn supervised_loss_tape(tape: &mut Tape, preds: Var, labels: &[usize], w: &ClassWeights) -> Result<Var> {
    let shape = tape.shape(preds).to_vec();
    let (m, k) = (shape[0], shape[1]);
    if labels.len() != m || m == 0 {
        return invalid("predictions and labels differ in length");
    }
    check_labels(labels, k)?;
    let mut mask = vec![0.0; m * k];
    for (i, &y) in labels.iter().enumerate() {
        mask[i * k + y] = w.get(y);
    }
    let logp = tape.log(preds, LOG_FLOOR)?;
    let picked = tape.mul_const(logp, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.scale(total, -1.0 / m as f64)?)
}

/// Tape version of [`adversarial_loss`] computed from discriminator logits.
/// `class_preds` are detached prediction rows used only for weighting.
pub fn adversarial_loss_tape(
    tape: &mut Tape,
    d_logits: Var,
    class_preds: &[Vec<f64>],
    domains: &[f64],
    w: &ClassWeights,
    gates: AdversarialGates,
) -> Result<Var> {
    let shape = tape.shape(d_logits).to_vec();
    let (m, heads) = (shape[0], shape[1]);
    if class_preds.len() != m || domains.len() != m {
        return invalid("adversarial loss inputs are misaligned");
    }
    let weights = adversarial_weights(class_preds, heads, w, gates)?;
    let targets: Vec<f64> = domains
        .iter()
        .flat_map(|&d| std::iter::repeat_n(d, heads))
        .collect();
    let per = tape.bce_with_logits(d_logits, targets)?;
    let weighted = tape.mul_const(per, weights)?;
    let total = tape.sum(weighted)?;
    Ok(tape.scale(total, 1.0 / m as f64)?)
}

/// Mean row entropy on the tape (differentiable through the predictions).
pub fn mean_entropy_tape(tape: &mut Tape, preds: Var) -> Result<Var> {
    let m = tape.shape(preds)[0];
    let logp = tape.log(preds, LOG_FLOOR)?;
    let plogp = tape.mul(preds, logp)?;
    let total = tape.sum(plogp)?;
    Ok(tape.scale(total, -1.0 / m as f64)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::LN_2;

    const ALL_OFF: AdversarialGates = AdversarialGates {
        instance_sel: false,
        class_sel: false,
        entropy_weight: false,
    };

    #[test]
    fn breakdown_objective() {
        let b = LossBreakdown::new(1.0, 0.5, 0.25);
        assert_eq!(b.objective, 1.25);
        assert_eq!(LossBreakdown::new(1.0, 0.5, 0.0).objective, 1.5);
    }

    #[test]
    fn supervised_examples() {
        let preds = vec![vec![0.5, 0.5]];
        let w = ClassWeights::new(vec![0.8, 0.2]);
        assert_abs_diff_eq!(supervised_loss(&preds, &[0], &w).unwrap(), 0.8 * LN_2, epsilon = 1e-15);

        let preds = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]];
        let labels = [2, 0];
        let plain = supervised_loss(&preds, &labels, &ClassWeights::ones(3)).unwrap();
        let uni = supervised_loss(&preds, &labels, &ClassWeights::uniform(3)).unwrap();
        assert_abs_diff_eq!(uni, plain / 3.0, epsilon = 1e-15);

        let zero = ClassWeights::new(vec![0.0, 1.0, 0.0]);
        assert_eq!(supervised_loss(&preds, &labels, &zero).unwrap(), 0.0);
        assert!(supervised_loss(&[], &[], &zero).is_err());
        assert!(supervised_loss(&preds, &[3, 0], &zero).is_err());
    }

    #[test]
    fn supervised_is_linear_in_w() {
        let preds = vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1], vec![0.1, 0.8, 0.1]];
        let labels = [2, 0, 1];
        let w = ClassWeights::new(vec![0.3, 0.5, 0.2]);
        let base = supervised_loss(&preds, &labels, &w).unwrap();
        let c = 3.7;
        let scaled = ClassWeights::new(w.as_slice().iter().map(|v| v * c).collect());
        assert_abs_diff_eq!(supervised_loss(&preds, &labels, &scaled).unwrap(), c * base, epsilon = 1e-13);
    }

    #[test]
    fn pseudo_label_examples() {
        let p = Tensor::from_rows(&[
            vec![0.0, 0.0, 1.0],
            vec![1.0 / 3.0; 3],
            vec![0.2, 0.5, 0.3],
        ])
        .unwrap();
        let pl = assign_pseudo_labels(&p);
        assert_eq!(pl.hard, vec![2, 0, 1]);
        assert_eq!(pl.soft[2], vec![0.2, 0.5, 0.3]);
    }

    #[test]
    fn self_training_examples() {
        let w = ClassWeights::new(vec![0.6, 0.4]);
        let preds = vec![vec![0.5, 0.5]];
        assert_eq!(self_training_loss(&preds, &[0], &w, false).unwrap(), 0.0);
        assert_abs_diff_eq!(
            self_training_loss(&preds, &[0], &w, true).unwrap(),
            0.6 * LN_2,
            epsilon = 1e-15
        );
        let one_hot = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(self_training_loss(&one_hot, &[1, 0], &w, true).unwrap(), 0.0);
    }

    #[test]
    fn adversarial_examples() {
        // single class, D = 0.5 on a source sample
        let l = adversarial_loss(&[vec![0.5]], &[vec![1.0]], &[1.0], &ClassWeights::new(vec![1.0]), ALL_OFF).unwrap();
        assert_abs_diff_eq!(l, LN_2, epsilon = 1e-15);

        let gates = AdversarialGates {
            instance_sel: true,
            class_sel: true,
            entropy_weight: true,
        };
        let dp = vec![vec![0.3, 0.6, 0.9], vec![0.2, 0.4, 0.7]];
        let cp = vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.1, 0.4]];
        let doms = [1.0, 0.0];
        // w_k = 0 on head 1: perturbing head 1's output changes nothing
        let w = ClassWeights::new(vec![0.5, 0.0, 0.5]);
        let base = adversarial_loss(&dp, &cp, &doms, &w, gates).unwrap();
        let mut dp2 = dp.clone();
        dp2[0][1] = 0.01;
        dp2[1][1] = 0.99;
        assert_eq!(adversarial_loss(&dp2, &cp, &doms, &w, gates).unwrap(), base);

        // one-hot instance weights route each sample to exactly one head
        let cp1 = vec![vec![0.0, 1.0, 0.0]];
        let ones = ClassWeights::ones(3);
        let g = AdversarialGates { instance_sel: true, ..ALL_OFF };
        let l = adversarial_loss(&[vec![0.3, 0.6, 0.9]], &cp1, &[1.0], &ones, g).unwrap();
        assert_abs_diff_eq!(l, -(0.6f64).ln(), epsilon = 1e-15);

        assert!(adversarial_loss(&dp, &cp, &[1.0], &w, gates).is_err());
    }

    #[test]
    fn adversarial_reduces_to_single_discriminator_loss() {
        // K heads with identical outputs, gates off and uniform instance
        // weights 1/K summed over heads equals one head's plain loss.
        let dp_single = vec![vec![0.3], vec![0.8], vec![0.55]];
        let doms = [1.0, 0.0, 1.0];
        let single = adversarial_loss(&dp_single, &vec![vec![1.0]; 3], &doms, &ClassWeights::ones(1), ALL_OFF).unwrap();
        let plain: f64 = dp_single
            .iter()
            .zip(doms)
            .map(|(p, d)| -(d * p[0].ln() + (1.0 - d) * (1.0 - p[0]).ln()))
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(single, plain, epsilon = 1e-15);
        let dp_multi: Vec<Vec<f64>> = dp_single.iter().map(|r| vec![r[0]; 4]).collect();
        let uniform = vec![vec![0.25; 4]; 3];
        let g = AdversarialGates { instance_sel: true, ..ALL_OFF };
        let multi = adversarial_loss(&dp_multi, &uniform, &doms, &ClassWeights::ones(4), g).unwrap();
        assert_abs_diff_eq!(multi, plain, epsilon = 1e-15);
    }

    #[test]
    fn tape_and_numeric_forms_agree() {
        let logits = vec![vec![0.3, -1.2, 2.0], vec![-0.4, 0.9, 0.1]];
        let probs: Vec<Vec<f64>> = logits
            .iter()
            .map(|r| r.iter().map(|&z: &f64| 1.0 / (1.0 + (-z).exp())).collect())
            .collect();
        let cp = vec![vec![0.2, 0.3, 0.5], vec![0.5, 0.1, 0.4]];
        let doms = [1.0, 0.0];
        let w = ClassWeights::new(vec![0.5, 0.2, 0.3]);
        let gates = AdversarialGates {
            instance_sel: true,
            class_sel: true,
            entropy_weight: true,
        };
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::from_rows(&logits).unwrap());
        let l = adversarial_loss_tape(&mut tape, z, &cp, &doms, &w, gates).unwrap();
        let numeric = adversarial_loss(&probs, &cp, &doms, &w, gates).unwrap();
        assert_abs_diff_eq!(tape.scalar_value(l).unwrap(), numeric, epsilon = 1e-12);

        let p = tape.constant(&Tensor::from_rows(&cp).unwrap());
        let s = supervised_loss_tape(&mut tape, p, &[2, 0], &w).unwrap();
        assert_abs_diff_eq!(
            tape.scalar_value(s).unwrap(),
            supervised_loss(&cp, &[2, 0], &w).unwrap(),
            epsilon = 1e-15
        );
        let e = mean_entropy_tape(&mut tape, p).unwrap();
        assert_abs_diff_eq!(tape.scalar_value(e).unwrap(), mean_entropy(&cp), epsilon = 1e-15);
    }
}
