//! Classification metrics: per-class precision/recall/F1, support-weighted
//! F1, accuracy and one-vs-rest rank AUC.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub support: usize,
    /// `None` when the class never occurs in the labels.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    /// `None` when the class has no positives or no negatives.
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSet {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub macro_auc: Option<f64>,
}

/// Metrics of `predictions` against `labels`, with `scores[i][k]` the
/// probability of class `k` for sample `i`.
pub fn compute_metrics(
    scores: &[Vec<f64>],
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<MetricSet> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Input("no samples to score".into()));
    }
    if scores.len() != n || predictions.len() != n {
        return Err(Error::Input(format!(
            "{} score rows and {} predictions for {n} labels",
            scores.len(),
            predictions.len()
        )));
    }
    if let Some(bad) = labels.iter().chain(predictions).find(|&&k| k >= n_classes) {
        return Err(Error::Input(format!(
            "class {bad} out of range for {n_classes} classes"
        )));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != n_classes) {
        return Err(Error::Input(format!(
            "score row of width {} for {n_classes} classes",
            row.len()
        )));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == k, y == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        let support = tp + fneg;
        if support == 0 {
            log::warn!("class {k} does not occur in the labels; its F1 and AUC are undefined");
            per_class.push(ClassMetrics {
                support,
                precision: None,
                recall: None,
                f1: None,
                auc: None,
            });
            continue;
        }
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let column: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let positive: Vec<bool> = labels.iter().map(|&y| y == k).collect();
        per_class.push(ClassMetrics {
            support,
            precision: Some(precision),
            recall: Some(tp as f64 / support as f64),
            f1: Some(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64),
            auc: rank_auc(&column, &positive),
        });
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    let (mut weighted, mut total) = (0.0, 0usize);
    for c in &per_class {
        if let Some(f1) = c.f1 {
            weighted += c.support as f64 * f1;
            total += c.support;
        }
    }
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    Ok(MetricSet {
        accuracy: correct as f64 / n as f64,
        per_class,
        weighted_f1: weighted / total as f64,
        macro_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    })
}

/// Area under the ROC curve from the Mann-Whitney rank statistic with
/// midranks for ties. The statistic is accumulated on doubled ranks so
/// every intermediate value is an integer.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n = scores.len();
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut doubled_rank_sum: u64 = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based positions i+1 ..= j+1 share the midrank (i + j + 2) / 2.
        let doubled = (i + j + 2) as u64;
        for &idx in &order[i..=j] {
            if positive[idx] {
                doubled_rank_sum += doubled;
            }
        }
        i = j + 1;
    }
    let p = n_pos as u64;
    let u_doubled = doubled_rank_sum - p * (p + 1);
    Some(u_doubled as f64 / (2 * n_pos * n_neg) as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    crate::synthbench::pretrain::argmax(xs)
}
