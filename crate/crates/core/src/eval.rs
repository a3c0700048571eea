//! Ranking and calibration metrics.

use crate::error::{CsdmError, Result};
use crate::numcore::bce_loss;

/// Scores paired with binary labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(CsdmError::dim(
                &[scores.len()],
                &[labels.len()],
                "scores vs labels",
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(CsdmError::Validation(format!("label {bad} is not binary")));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Area under the ROC curve via the Mann-Whitney rank sum. Tied scores share
/// their average rank, so each tied positive/negative pair counts one half.
pub fn auc(set: &ScoredSet) -> Result<f64> {
    let n_pos = set.labels.iter().filter(|&&l| l == 1).count();
    let n_neg = set.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CsdmError::MetricUndefined(format!(
            "AUC needs both classes ({n_pos} positive, {n_neg} negative)"
        )));
    }
    if set.scores.iter().any(|s| s.is_nan()) {
        return Err(CsdmError::MetricUndefined("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.sort_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b]));

    // Ranks are 1-based; a tie group spanning positions i..j gets (i+1+j)/2.
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && set.scores[order[j]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| set.labels[k] == 1).count();
        pos_rank_sum += avg_rank * pos_in_group as f64;
        i = j;
    }
    let p = n_pos as f64;
    let u = pos_rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * n_neg as f64))
}

/// Relative AUC improvement over a baseline, in percent, measured above the
/// 0.5 random-guess level.
pub fn rela_impr(model_auc: f64, baseline_auc: f64) -> Result<f64> {
    if baseline_auc == 0.5 {
        return Err(CsdmError::MetricUndefined(
            "baseline AUC is exactly 0.5".into(),
        ));
    }
    Ok(((model_auc - 0.5) / (baseline_auc - 0.5) - 1.0) * 100.0)
}

/// Mean clamped binary cross-entropy of probabilities against labels.
pub fn log_loss(set: &ScoredSet) -> Result<f64> {
    if set.is_empty() {
        return Err(CsdmError::MetricUndefined(
            "log-loss of an empty set".into(),
        ));
    }
    let mut total = 0.0;
    for (&p, &y) in set.scores.iter().zip(&set.labels) {
        total += bce_loss(p, y as f64)?;
    }
    Ok(total / set.len() as f64)
}
