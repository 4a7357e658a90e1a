// SPDX-License-Identifier: MIT OR Apache-2.0

//! Calibrated accuracy, permuted score, critical layer, prefix-matching and
//! false-label-promoting scores.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interventions::HeadId;
use crate::model::ForwardTrace;
use crate::prompting::PromptInstance;

/// Per-prompt class probabilities read at one layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalBatch {
    /// `probs[i][c]`: probability of class `c`'s label for prompt `i`.
    pub probs: Vec<Vec<f64>>,
    pub truths: Vec<usize>,
    /// `sigma(truth)` per prompt.
    pub permuted: Vec<usize>,
    pub layer: usize,
}

impl EvalBatch {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.first().map_or(0, Vec::len)
    }

    pub fn push(&mut self, probs: Vec<f64>, truth: usize, permuted: usize) {
        self.probs.push(probs);
        self.truths.push(truth);
        self.permuted.push(permuted);
    }

    fn validate(&self) -> Result<usize> {
        let c = self.n_classes();
        if c < 2 {
            return Err(Error::Metric(format!("need at least 2 classes, got {c}")));
        }
        if self.truths.len() != self.len() || self.permuted.len() != self.len() {
            return Err(Error::Metric("batch columns have different lengths".into()));
        }
        for (i, row) in self.probs.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Metric(format!(
                    "prompt {i} has {} classes, expected {c}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Metric(format!(
                    "prompt {i} has a probability outside [0, 1]"
                )));
            }
        }
        if let Some(&t) = self.truths.iter().chain(&self.permuted).find(|&&t| t >= c) {
            return Err(Error::Metric(format!(
                "class id {t} out of range for {c} classes"
            )));
        }
        Ok(c)
    }
}

/// Quantile with linear interpolation between order statistics
/// (position `(n - 1) * q` in the sorted sample).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Per-class thresholds: the `(c-1)/c` quantile of each class's probability
/// over the batch.
pub fn class_thresholds(batch: &EvalBatch) -> Result<Vec<f64>> {
    let c = batch.validate()?;
    let q = (c - 1) as f64 / c as f64;
    Ok((0..c)
        .map(|class| {
            let col: Vec<f64> = batch.probs.iter().map(|r| r[class]).collect();
            quantile(&col, q)
        })
        .collect())
}

/// Fraction of prompts whose true-class probability is strictly above that
/// class's threshold.
pub fn calibrated_accuracy(batch: &EvalBatch) -> Result<f64> {
    let c = batch.validate()?;
    if batch.len() < 2 {
        return Err(Error::Metric(format!(
            "need at least 2 prompts, got {}",
            batch.len()
        )));
    }
    let mut present = vec![false; c];
    for &t in &batch.truths {
        present[t] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::Metric(format!(
            "class {missing} is absent from the batch"
        )));
    }
    let thresholds = class_thresholds(batch)?;
    let hits = batch
        .probs
        .iter()
        .zip(&batch.truths)
        .filter(|(row, &t)| calibrated_hit(row, t, &thresholds))
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

// When no class clears its threshold the prediction falls back to the
// largest margin, lowest class index first.
fn calibrated_hit(row: &[f64], truth: usize, thresholds: &[f64]) -> bool {
    if row[truth] > thresholds[truth] {
        return true;
    }
    let margins: Vec<f64> = row.iter().zip(thresholds).map(|(p, t)| p - t).collect();
    margins.iter().all(|&m| m <= 0.0) && argmax(&margins) == truth
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// How often the argmax class is `sigma(truth)`, divided by the `1/c` chance
/// rate.
pub fn permuted_score(batch: &EvalBatch) -> Result<f64> {
    let c = batch.validate()?;
    if c < 3 {
        return Err(Error::Metric(format!(
            "permuted score needs at least 3 classes, got {c}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::Metric("empty batch".into()));
    }
    let hits = batch
        .probs
        .iter()
        .zip(&batch.permuted)
        .filter(|(row, &s)| argmax(row) == s)
        .count();
    let raw = hits as f64 / batch.len() as f64;
    Ok(raw * c as f64)
}

/// `calibrated_accuracy(correct) - calibrated_accuracy(incorrect)`.
pub fn accuracy_gap(correct: &EvalBatch, incorrect: &EvalBatch) -> Result<f64> {
    Ok(calibrated_accuracy(correct)? - calibrated_accuracy(incorrect)?)
}

/// Smallest layer whose gap reaches half the final gap.
pub fn critical_layer(gap_curve: &[f64]) -> Result<usize> {
    let last = *gap_curve
        .last()
        .ok_or_else(|| Error::Metric("empty gap curve".into()))?;
    if last.is_nan() || last <= 0.0 {
        return Err(Error::Metric(format!("no divergence: final gap is {last}")));
    }
    Ok(gap_curve
        .iter()
        .position(|&g| g >= 0.5 * last)
        .unwrap_or(gap_curve.len() - 1))
}

/// Attention mass from the query position onto each demonstration's label.
pub fn label_attention(
    trace: &ForwardTrace,
    prompt: &PromptInstance,
    layer: usize,
    head: usize,
) -> Result<Vec<f64>> {
    let pattern = trace
        .attention
        .get(layer)
        .and_then(|l| l.get(head))
        .ok_or_else(|| Error::Index(format!("no head ({layer}, {head}) in trace")))?;
    let q = prompt.query_answer_position;
    if q >= pattern.rows() {
        return Err(Error::Index(format!(
            "query position {q} outside trace of {}",
            pattern.rows()
        )));
    }
    let row = pattern.row(q);
    Ok(prompt
        .label_spans
        .iter()
        .map(|span| row[span.clone()].iter().map(|&a| f64::from(a)).sum())
        .collect())
}

/// Prefix-matching score of one head on one prompt.
pub fn prefix_matching_score(
    trace: &ForwardTrace,
    prompt: &PromptInstance,
    layer: usize,
    head: usize,
) -> Result<f64> {
    if prompt.demos.is_empty() {
        return Err(Error::Metric(
            "prefix matching needs at least one demonstration".into(),
        ));
    }
    let c = prompt.n_classes();
    if c < 2 {
        return Err(Error::Metric(format!("need at least 2 classes, got {c}")));
    }
    let att = label_attention(trace, prompt, layer, head)?;
    Ok(pm_from_masses(
        &att,
        prompt.demos.iter().map(|d| d.true_class),
        prompt.query.true_class,
        c,
    ))
}

/// `sum(same-class mass) - sum(other-class mass) / (c - 1)`.
pub fn pm_from_masses(
    masses: &[f64],
    demo_classes: impl IntoIterator<Item = usize>,
    query_class: usize,
    c: usize,
) -> f64 {
    let (mut same, mut other) = (0.0, 0.0);
    for (m, class) in masses.iter().zip(demo_classes) {
        if class == query_class {
            same += m;
        } else {
            other += m;
        }
    }
    same - other / (c - 1) as f64
}

/// Logit contribution to the permuted label minus that to the correct label.
pub fn false_label_promoting_score(
    contribution: &[f32],
    permuted_token: usize,
    correct_token: usize,
) -> Result<f64> {
    let get = |t: usize| {
        contribution.get(t).map(|&v| f64::from(v)).ok_or_else(|| {
            Error::Index(format!(
                "token {t} outside contribution of {}",
                contribution.len()
            ))
        })
    };
    Ok(get(permuted_token)? - get(correct_token)?)
}

/// Averaged head scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreRecord {
    pub layer: usize,
    pub head: usize,
    pub pm_score: f64,
    pub flp_score: f64,
}

/// The `n` heads with the largest PM score; ties go to the smaller
/// `(layer, head)`.
pub fn select_top_pm_heads(records: &[HeadScoreRecord], n: usize) -> Result<Vec<HeadId>> {
    if n > records.len() {
        return Err(Error::Argument(format!(
            "asked for {n} heads out of {}",
            records.len()
        )));
    }
    let mut sorted: Vec<&HeadScoreRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        b.pm_score
            .partial_cmp(&a.pm_score)
            .unwrap_or(Ordering::Equal)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    Ok(sorted
        .into_iter()
        .take(n)
        .map(|r| (r.layer, r.head))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary(p_true: &[f64], truths: &[usize]) -> EvalBatch {
        let mut b = EvalBatch::default();
        for (&p, &t) in p_true.iter().zip(truths) {
            b.push(vec![1.0 - p, p], t, 1 - t);
        }
        b
    }

    #[test]
    fn calibrated_accuracy_examples() {
        // classes: 0 = False, 1 = True
        let b = binary(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        let th = class_thresholds(&b).unwrap();
        assert!((th[1] - 0.5).abs() < 1e-12);
        assert_eq!(calibrated_accuracy(&b).unwrap(), 1.0);

        let b = binary(&[0.7; 4], &[1, 1, 0, 0]);
        assert_eq!(calibrated_accuracy(&b).unwrap(), 0.5);

        let shuffled = binary(&[0.1, 0.9, 0.2, 0.8], &[0, 1, 0, 1]);
        assert_eq!(calibrated_accuracy(&shuffled).unwrap(), 1.0);
    }

    #[test]
    fn calibrated_accuracy_errors() {
        let b = binary(&[0.9, 0.8], &[1, 1]);
        let err = calibrated_accuracy(&b).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
        assert!(calibrated_accuracy(&binary(&[0.9], &[1])).is_err());
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        assert!((quantile(&[0.0, 3.0, 6.0], 2.0 / 3.0) - 4.0).abs() < 1e-12);
        assert_eq!(quantile(&[5.0], 0.7), 5.0);
    }

    #[test]
    fn permuted_score_examples() {
        let mut all_sigma = EvalBatch::default();
        let mut all_true = EvalBatch::default();
        for t in 0..3 {
            let s = (t + 1) % 3;
            let mut p = vec![0.1; 3];
            p[s] = 0.8;
            all_sigma.push(p, t, s);
            let mut p = vec![0.1; 3];
            p[t] = 0.8;
            all_true.push(p, t, s);
        }
        assert!((permuted_score(&all_sigma).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(permuted_score(&all_true).unwrap(), 0.0);
        let two = binary(&[0.5, 0.5], &[0, 1]);
        assert!(permuted_score(&two).is_err());
    }

    #[test]
    fn gap_examples() {
        let b = binary(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(accuracy_gap(&b, &b).unwrap(), 0.0);
        assert!((0.75f64 - 0.35 - 0.40).abs() < 1e-12);
    }

    #[test]
    fn critical_layer_examples() {
        assert_eq!(critical_layer(&[0.0, 0.0, 0.1, 0.4, 0.5, 0.5]).unwrap(), 3);
        assert!(critical_layer(&[0.3, 0.2, 0.1, 0.0]).is_err());
        assert_eq!(critical_layer(&[0.2; 5]).unwrap(), 0);
        assert!(critical_layer(&[]).is_err());
    }

    #[test]
    fn pm_arithmetic() {
        // ten label spans, uniform mass a, balanced over 2 classes
        let a = 0.05;
        let classes = [0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        assert!(pm_from_masses(&[a; 10], classes, 0, 2).abs() < 1e-12);
        assert!((pm_from_masses(&[0.3, 0.3, 0.0], [1, 1, 0], 1, 2) - 0.6).abs() < 1e-12);
        let pm = pm_from_masses(&[0.1, 0.2, 0.1, 0.05, 0.05], [0, 0, 1, 2, 1], 0, 3);
        assert!((pm - 0.2).abs() < 1e-12);
    }

    #[test]
    fn flp_examples() {
        assert_eq!(false_label_promoting_score(&[0.0; 4], 1, 2).unwrap(), 0.0);
        assert_eq!(
            false_label_promoting_score(&[0.0, 3.0, -2.0], 1, 2).unwrap(),
            5.0
        );
        assert!(false_label_promoting_score(&[0.0], 1, 0).is_err());
    }

    #[test]
    fn top_heads() {
        let r = |layer, head, pm| HeadScoreRecord {
            layer,
            head,
            pm_score: pm,
            flp_score: 0.0,
        };
        let recs = vec![r(0, 0, 0.1), r(1, 1, 0.9), r(1, 0, 0.5), r(0, 1, 0.9)];
        assert!(select_top_pm_heads(&recs, 0).unwrap().is_empty());
        assert_eq!(select_top_pm_heads(&recs, 1).unwrap(), vec![(0, 1)]);
        assert_eq!(
            select_top_pm_heads(&recs, 3).unwrap(),
            vec![(0, 1), (1, 1), (1, 0)]
        );
        assert!(select_top_pm_heads(&recs, 5).is_err());
    }
}
