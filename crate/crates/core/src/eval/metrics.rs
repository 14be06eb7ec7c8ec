use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub macro_f1: f64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub auprc: f64,
    pub auroc: f64,
    /// Set when some class had no positives or no negatives in `y_true`, so
    /// at least one one-vs-rest AUROC fell back to 0.5.
    pub auroc_undefined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub mse: f64,
    pub mape: f64,
    /// Targets equal to zero, left out of MAPE.
    pub mape_excluded: usize,
}

/// Rank-statistic AUROC with mid-ranks for ties; `None` when `y` holds a
/// single class.
pub fn auroc(y: &[bool], score: &[f64]) -> Option<f64> {
    let n_pos = y.iter().filter(|&&b| b).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| y[k]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Step-wise average precision over distinct score thresholds. Constant
/// scores give the positive prevalence; no positives gives 0.
pub fn average_precision(y: &[bool], score: &[f64]) -> f64 {
    let n_pos = y.iter().filter(|&&b| b).count();
    if n_pos == 0 {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..y.len()).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        for &k in &idx[i..=j] {
            if y[k] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    ap
}

/// Classification metrics. `scores[i][c]` is the score of class `c` for
/// sample `i`. Binary tasks score AUROC/AUPRC on class 1; multiclass tasks
/// macro-average one-vs-rest. A class never predicted has precision 0.
pub fn classification_metrics(y_true: &[usize], y_pred: &[usize], scores: &[Vec<f64>], n_classes: usize) -> Result<ClassificationMetrics> {
    let n = y_true.len();
    if n == 0 || y_pred.len() != n || scores.len() != n {
        return Err(invalid("metric inputs must be non-empty and aligned"));
    }
    if n_classes < 2 {
        return Err(invalid("classification needs at least two classes"));
    }
    if y_true.iter().chain(y_pred).any(|&c| c >= n_classes) || scores.iter().any(|s| s.len() != n_classes) {
        return Err(invalid("class index or score width out of range"));
    }
    let mut prec = 0.0;
    let mut rec = 0.0;
    let mut f1 = 0.0;
    for c in 0..n_classes {
        let tp = (0..n).filter(|&i| y_true[i] == c && y_pred[i] == c).count() as f64;
        let pred = y_pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = y_true.iter().filter(|&&t| t == c).count() as f64;
        let p = if pred > 0.0 { tp / pred } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        prec += p;
        rec += r;
        f1 += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    }
    let k = n_classes as f64;
    let accuracy = (0..n).filter(|&i| y_true[i] == y_pred[i]).count() as f64 / n as f64;

    let one_vs_rest = |c: usize| {
        let y: Vec<bool> = y_true.iter().map(|&t| t == c).collect();
        let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
        (auroc(&y, &s), average_precision(&y, &s))
    };
    let classes: Vec<usize> = if n_classes == 2 { vec![1] } else { (0..n_classes).collect() };
    let mut auroc_sum = 0.0;
    let mut auprc_sum = 0.0;
    let mut undefined = false;
    for &c in &classes {
        let (roc, pr) = one_vs_rest(c);
        undefined |= roc.is_none();
        auroc_sum += roc.unwrap_or(0.5);
        auprc_sum += pr;
    }
    let m = classes.len() as f64;
    Ok(ClassificationMetrics {
        macro_f1: f1 / k,
        accuracy,
        macro_precision: prec / k,
        macro_recall: rec / k,
        auprc: auprc_sum / m,
        auroc: auroc_sum / m,
        auroc_undefined: undefined,
    })
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionMetrics> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(invalid("metric inputs must be non-empty and aligned"));
    }
    let n = y_true.len() as f64;
    let mae = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).abs()).sum::<f64>() / n;
    let mse = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum::<f64>() / n;
    let nz: Vec<f64> = y_true.iter().zip(y_pred).filter(|(y, _)| **y != 0.0).map(|(y, p)| ((y - p) / y).abs()).collect();
    let mape = if nz.is_empty() { 0.0 } else { nz.iter().sum::<f64>() / nz.len() as f64 };
    Ok(RegressionMetrics { mae, mse, mape, mape_excluded: y_true.len() - nz.len() })
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
