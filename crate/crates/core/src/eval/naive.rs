use super::metrics::{classification_metrics, regression_metrics, ClassificationMetrics, RegressionMetrics};
use crate::error::{invalid, Result};

/// Most frequent class of `y`; ties go to the lowest class index.
pub fn majority_class(y: &[usize], n_classes: usize) -> usize {
    let mut counts = vec![0usize; n_classes];
    for &c in y {
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Predicts the training majority class with a constant one-hot score, so
/// AUROC is 0.5 and AUPRC equals the positive prevalence.
pub fn naive_classify(train_y: &[usize], test_y: &[usize], n_classes: usize) -> Result<ClassificationMetrics> {
    if train_y.is_empty() || train_y.iter().any(|&c| c >= n_classes) {
        return Err(invalid("naive baseline needs labelled training data"));
    }
    let m = majority_class(train_y, n_classes);
    let scores: Vec<Vec<f64>> =
        test_y.iter().map(|_| (0..n_classes).map(|c| if c == m { 1.0 } else { 0.0 }).collect()).collect();
    classification_metrics(test_y, &vec![m; test_y.len()], &scores, n_classes)
}

/// Predicts the training mean.
pub fn naive_regress(train_y: &[f64], test_y: &[f64]) -> Result<RegressionMetrics> {
    if train_y.is_empty() {
        return Err(invalid("naive baseline needs training targets"));
    }
    let mean = train_y.iter().sum::<f64>() / train_y.len() as f64;
    regression_metrics(test_y, &vec![mean; test_y.len()])
}
