//! Abstention evaluation on sets where part of the questions lost their
//! correct option.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::annotator::subsample_count;
use crate::confidence::ConfidenceScore;
use crate::error::{Error, Result};
use crate::types::{choice_letter, AnswerValue, Choice, Dataset, RngSeed};

pub const DEFAULT_REJECT_FRACTION: f64 = 0.5;

/// Remove the correct option from a seeded `ceil(fraction * N)` subset,
/// re-letter the survivors from `A`, and relabel those records as reject.
pub fn build_rejection_set(dataset: &Dataset, fraction: f64, seed: RngSeed) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Range(fraction));
    }
    for r in &dataset.records {
        let unsupported = |reason: &str| Error::UnsupportedRecord {
            id: r.id.clone(),
            reason: reason.into(),
        };
        match &r.choices {
            None => return Err(unsupported("free-text record")),
            Some(c) if c.len() < 2 => return Err(unsupported("fewer than two choices")),
            Some(_) => {}
        }
        if !matches!(r.ground_truth, AnswerValue::Choice(_)) {
            return Err(unsupported("ground truth is not a choice letter"));
        }
    }

    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    seed.shuffle(&mut order);
    let mut corrupt = vec![false; n];
    for &i in &order[..subsample_count(fraction, n)] {
        corrupt[i] = true;
    }

    let records = dataset
        .records
        .iter()
        .zip(&corrupt)
        .map(|(r, &hit)| {
            if !hit {
                return r.clone();
            }
            let AnswerValue::Choice(letter) = r.ground_truth else {
                unreachable!("checked above")
            };
            let choices: Vec<Choice> = r
                .choices
                .as_deref()
                .unwrap_or_default()
                .iter()
                .filter(|c| !c.letter.starts_with(letter))
                .enumerate()
                .map(|(i, c)| Choice::new(choice_letter(i), c.text.clone()))
                .collect();
            let mut out = r.clone();
            out.choices = Some(choices);
            out.ground_truth = AnswerValue::Reject;
            out
        })
        .collect();
    Ok(Dataset {
        records,
        split_tag: dataset.split_tag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RejectDecision {
    Abstain,
    Answer,
}

/// Abstain iff `score < threshold`.
pub fn reject_decision(score: &ConfidenceScore, threshold: f64) -> RejectDecision {
    if score.value < threshold {
        RejectDecision::Abstain
    } else {
        RejectDecision::Answer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fpr,tpr\n");
        for (f, t) in &self.points {
            let _ = writeln!(out, "{f},{t}");
        }
        let _ = writeln!(out, "# auc={}", self.auc);
        out
    }
}

/// ROC of the rejection score `1 - confidence` against reject-truth labels.
pub fn roc_curve(scores: &[ConfidenceScore], is_reject_truth: &[bool]) -> Result<RocCurve> {
    let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
    roc_from_confidence(&values, is_reject_truth)
}

pub fn roc_from_confidence(confidence: &[f64], is_reject_truth: &[bool]) -> Result<RocCurve> {
    let rejection: Vec<f64> = confidence.iter().map(|c| 1.0 - c).collect();
    roc_from_scores(&rejection, is_reject_truth)
}

/// ROC where a higher `score` means "more likely positive". Equal scores
/// form a single step.
pub fn roc_from_scores(score: &[f64], positive: &[bool]) -> Result<RocCurve> {
    if score.len() != positive.len() {
        return Err(Error::LengthMismatch {
            left: score.len(),
            right: positive.len(),
        });
    }
    if let Some(s) = score.iter().find(|s| s.is_nan()) {
        return Err(Error::InvalidArgument(format!("NaN score {s}")));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::DegenerateLabels(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = score[order[i]];
        while i < order.len() && score[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    let auc = trapezoid(&points);
    Ok(RocCurve { points, auc })
}

pub fn trapezoid(points: &[(f64, f64)]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}
