//! Classification metrics: accuracy, macro-F1 and macro one-vs-rest AUC.

use serde::{Deserialize, Serialize};

use crate::error::{CerdError, Result};
use crate::evidence::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
}

pub fn accuracy(labels: &[usize], predicted: &[usize]) -> f64 {
    let hits = labels.iter().zip(predicted).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1; a class with no true and no predicted
/// members contributes 0.
pub fn macro_f1(labels: &[usize], predicted: &[usize], num_classes: usize) -> f64 {
    let total: f64 = (0..num_classes)
        .map(|c| {
            let tp = labels.iter().zip(predicted).filter(|(&y, &p)| y == c && p == c).count();
            let fp = labels.iter().zip(predicted).filter(|(&y, &p)| y != c && p == c).count();
            let fn_ = labels.iter().zip(predicted).filter(|(&y, &p)| y == c && p != c).count();
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                2.0 * tp as f64 / denom as f64
            }
        })
        .sum();
    total / num_classes as f64
}

/// Rank-statistic AUC of `scores` for the positives; `None` without both classes.
/// Tied scores receive their average rank, so ties count one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean of the defined per-class one-vs-rest AUCs. Classes lacking positives or
/// negatives are skipped with a warning; `None` if no class is defined.
pub fn macro_auc(labels: &[usize], probabilities: &[Vec<f64>], num_classes: usize) -> Option<f64> {
    let mut sum = 0.0;
    let mut defined = 0;
    for c in 0..num_classes {
        let scores: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
        match binary_auc(&scores, &pos) {
            Some(a) => {
                sum += a;
                defined += 1;
            }
            None => log::warn!("class {c}: one-vs-rest AUC undefined on this split, excluded from the macro mean"),
        }
    }
    (defined > 0).then(|| sum / defined as f64)
}

/// Accuracy, macro-F1 and macro-AUC from per-subject class probabilities.
/// An undefined macro-AUC is reported as 0.5.
pub fn evaluate_scores(labels: &[usize], probabilities: &[Vec<f64>], num_classes: usize) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(CerdError::Evaluation("cannot evaluate an empty split".into()));
    }
    if labels.len() != probabilities.len() {
        return Err(CerdError::Dimension(format!(
            "{} labels for {} score rows",
            labels.len(),
            probabilities.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(CerdError::Label(format!("label {bad} with {num_classes} classes")));
    }
    let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
    Ok(Metrics {
        accuracy: accuracy(labels, &predicted),
        macro_f1: macro_f1(labels, &predicted, num_classes),
        macro_auc: macro_auc(labels, probabilities, num_classes).unwrap_or(0.5),
    })
}
