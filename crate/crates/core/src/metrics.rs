//! Frame-level detection metrics against ground-truth labels.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
    /// Share of ground-truth normal frames that were flagged.
    pub false_positive_rate: f64,
}

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::invalid(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Precision and recall of boolean flags. An empty denominator gives 0.
pub fn precision_recall(flags: &[bool], labels: &[bool]) -> Result<(f64, f64)> {
    check_len(flags.len(), labels.len())?;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&f, &l) in flags.iter().zip(labels) {
        match (f, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((ratio(tp, tp + fp), ratio(tp, tp + fneg)))
}

/// Area under the ROC curve of `scores` ranking positives above negatives,
/// with ties counted as one half. Computed from average ranks.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUC needs both positive and negative labels"));
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
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn evaluate(scores: &[f64], flags: &[bool], labels: &[bool]) -> Result<DetectionMetrics> {
    check_len(flags.len(), labels.len())?;
    let (precision, recall) = precision_recall(flags, labels)?;
    let normals = labels.iter().filter(|&&l| !l).count();
    let flagged_normals = flags.iter().zip(labels).filter(|(&f, &l)| f && !l).count();
    Ok(DetectionMetrics {
        precision,
        recall,
        auc: auc(scores, labels)?,
        false_positive_rate: if normals == 0 {
            0.0
        } else {
            flagged_normals as f64 / normals as f64
        },
    })
}
