//! Frozen-embedding linear probes with cross-validated grid search.
//!
//! Classification uses L2-regularised logistic regression fitted by
//! L-BFGS, minimising `0.5‖w‖² + C·Σ loss`. Regression uses ridge
//! regression with an unpenalised intercept. Inputs are standardised with
//! statistics of the training data only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lbfgs::{self, LbfgsOptions};
use super::metrics::{argmax, classification_metrics, regression_metrics, ClassificationMetrics, RegressionMetrics};
use crate::error::{invalid, Error, Result};
use crate::util::{rng_for, shuffle};

pub const LOGISTIC_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];
pub const LOGISTIC_MAX_ITER_GRID: [usize; 2] = [1000, 10_000];
pub const LOGISTIC_SOLVERS: [&str; 1] = ["lbfgs"];
pub const RIDGE_ALPHA_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
pub const RIDGE_SOLVERS: [RidgeSolver; 3] = [RidgeSolver::Auto, RidgeSolver::Cholesky, RidgeSolver::SparseCg];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeSolver {
    /// Resolves to a direct Cholesky solve for dense inputs.
    Auto,
    Cholesky,
    /// Conjugate gradients on the normal equations.
    SparseCg,
}

impl RidgeSolver {
    pub fn name(self) -> &'static str {
        match self {
            RidgeSolver::Auto => "auto",
            RidgeSolver::Cholesky => "cholesky",
            RidgeSolver::SparseCg => "sparse_cg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GridParams {
    Logistic { c: f64, max_iter: usize },
    Ridge { alpha: f64, solver: RidgeSolver },
}

pub fn logistic_grid() -> Vec<GridParams> {
    LOGISTIC_C_GRID
        .iter()
        .flat_map(|&c| LOGISTIC_MAX_ITER_GRID.iter().map(move |&max_iter| GridParams::Logistic { c, max_iter }))
        .collect()
}

pub fn ridge_grid() -> Vec<GridParams> {
    RIDGE_ALPHA_GRID
        .iter()
        .flat_map(|&alpha| RIDGE_SOLVERS.iter().map(move |&solver| GridParams::Ridge { alpha, solver }))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { folds: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome<M> {
    pub metrics: M,
    pub best: GridParams,
    /// Mean cross-validation score of every grid point, in grid order.
    pub cv_scores: Vec<(GridParams, f64)>,
}

/// Per-feature standardisation (population std; constant features keep
/// unit scale).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl StandardScaler {
    pub fn fit(x: &[Vec<f64>]) -> Result<Self> {
        let d = feature_dim(x)?;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for j in 0..d {
                var[j] += (row[j] - mean[j]).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x.iter().any(|r| r.len() != self.mean.len()) {
            return Err(invalid("feature dimension differs from the fitted scaler"));
        }
        Ok(x.iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - self.mean[j]) / self.scale[j]).collect())
            .collect())
    }
}

fn feature_dim(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or_else(|| invalid("empty feature matrix"))?;
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(invalid("feature rows must share a non-zero dimension"));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("features must be finite"));
    }
    Ok(d)
}

/// Fitted logistic model. Binary problems use one weight row scoring class 1;
/// multiclass problems use a softmax over `k` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticModel {
    pub n_classes: usize,
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub iters: usize,
    pub converged: bool,
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter()
            .map(|r| {
                let z: Vec<f64> = self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, r) + b).collect();
                if self.n_classes == 2 {
                    let p1 = sigmoid(z[0]);
                    vec![1.0 - p1, p1]
                } else {
                    softmax(&z)
                }
            })
            .collect()
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<usize> {
        self.predict_proba(x).iter().map(|p| argmax(p)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Fits `0.5‖W‖² + C·Σ loss` by L-BFGS. The objective is divided by `C·n`
/// internally, which leaves the minimiser unchanged.
pub fn fit_logistic(x: &[Vec<f64>], y: &[usize], n_classes: usize, c: f64, max_iter: usize) -> Result<LogisticModel> {
    let d = feature_dim(x)?;
    if y.len() != x.len() || y.iter().any(|&v| v >= n_classes) || n_classes < 2 {
        return Err(invalid("labels must align with features and lie below n_classes"));
    }
    if !(c > 0.0) {
        return Err(invalid("C must be positive"));
    }
    let rows = if n_classes == 2 { 1 } else { n_classes };
    let n = x.len() as f64;
    let reg = 1.0 / (c * n);
    let stride = d + 1;
    let objective = |theta: &[f64], grad: &mut [f64]| -> f64 {
        grad.fill(0.0);
        let mut f = 0.0;
        for (r, &label) in x.iter().zip(y) {
            let z: Vec<f64> = (0..rows).map(|k| dot(&theta[k * stride..k * stride + d], r) + theta[k * stride + d]).collect();
            let dz: Vec<f64> = if rows == 1 {
                let t = if label == 1 { 1.0 } else { 0.0 };
                f += softplus(z[0]) - t * z[0];
                vec![sigmoid(z[0]) - t]
            } else {
                let p = softmax(&z);
                f -= p[label].max(f64::MIN_POSITIVE).ln();
                p.iter().enumerate().map(|(k, pk)| pk - if k == label { 1.0 } else { 0.0 }).collect()
            };
            for k in 0..rows {
                let gk = &mut grad[k * stride..(k + 1) * stride];
                for j in 0..d {
                    gk[j] += dz[k] * r[j] / n;
                }
                gk[d] += dz[k] / n;
            }
        }
        f /= n;
        for k in 0..rows {
            for j in 0..d {
                let w = theta[k * stride + j];
                f += 0.5 * reg * w * w;
                grad[k * stride + j] += reg * w;
            }
        }
        f
    };
    let opts = LbfgsOptions { max_iter, gtol: 1e-6, ..Default::default() };
    let res = lbfgs::minimize(objective, vec![0.0; rows * stride], &opts);
    let weights = (0..rows).map(|k| res.x[k * stride..k * stride + d].to_vec()).collect();
    let bias = (0..rows).map(|k| res.x[k * stride + d]).collect();
    Ok(LogisticModel { n_classes, weights, bias, iters: res.iters, converged: res.converged })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| dot(&self.weights, r) + self.intercept).collect()
    }
}

/// Ridge regression with an unpenalised intercept (inputs and targets are
/// centred before solving `(XᵀX + αI) w = Xᵀy`).
pub fn fit_ridge(x: &[Vec<f64>], y: &[f64], alpha: f64, solver: RidgeSolver) -> Result<RidgeModel> {
    let d = feature_dim(x)?;
    if y.len() != x.len() || y.iter().any(|v| !v.is_finite()) {
        return Err(invalid("targets must be finite and align with features"));
    }
    if !(alpha >= 0.0) {
        return Err(invalid("alpha must be non-negative"));
    }
    let n = x.len();
    let x_mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let xc = DMatrix::from_fn(n, d, |i, j| x[i][j] - x_mean[j]);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    let mut a = xc.transpose() * &xc;
    for j in 0..d {
        a[(j, j)] += alpha;
    }
    let b = xc.transpose() * yc;
    let w = match solver {
        RidgeSolver::Auto | RidgeSolver::Cholesky => match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a.lu().solve(&b).ok_or_else(|| Error::InvalidTask("singular ridge system".into()))?,
        },
        RidgeSolver::SparseCg => conjugate_gradient(&a, &b, 1e-12, 10 * d.max(10)),
    };
    let intercept = y_mean - w.iter().zip(&x_mean).map(|(wi, m)| wi * m).sum::<f64>();
    Ok(RidgeModel { weights: w.iter().copied().collect(), intercept })
}

fn conjugate_gradient(a: &DMatrix<f64>, b: &DVector<f64>, rtol: f64, max_iter: usize) -> DVector<f64> {
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let stop = rtol * rtol * b.dot(b);
    for _ in 0..max_iter {
        if rs <= stop {
            break;
        }
        let ap = a * &p;
        let step = rs / p.dot(&ap);
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_new = r.dot(&r);
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    x
}

/// Fold index per sample. With `strata`, each stratum is dealt round-robin
/// after a seeded shuffle so every fold sees every class.
pub fn kfold_assign(n: usize, folds: usize, strata: Option<&[usize]>, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, &[0xcf]);
    let mut fold = vec![0; n];
    let groups: Vec<Vec<usize>> = match strata {
        Some(s) => {
            let k = s.iter().copied().max().map_or(0, |m| m + 1);
            (0..k).map(|c| (0..n).filter(|&i| s[i] == c).collect()).collect()
        }
        None => vec![(0..n).collect()],
    };
    let mut offset = 0;
    for mut g in groups {
        shuffle(&mut g, &mut rng);
        for (j, &i) in g.iter().enumerate() {
            fold[i] = (j + offset) % folds;
        }
        offset += g.len();
    }
    fold
}

fn select<T: Clone>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i].clone()).collect()
}

fn split_folds(fold: &[usize], f: usize) -> (Vec<usize>, Vec<usize>) {
    (0..fold.len()).partition(|&i| fold[i] != f)
}

fn best_of(scores: &[(GridParams, f64)]) -> GridParams {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if s.1 > scores[best].1 {
            best = i;
        }
    }
    scores[best].0
}

fn check_folds(cfg: &ProbeConfig, n: usize) -> Result<()> {
    if cfg.folds < 2 || cfg.folds > n {
        return Err(invalid(format!("{} folds need between 2 and {n} samples", cfg.folds)));
    }
    Ok(())
}

/// Logistic probe over the full C × max_iter grid, scored by mean macro F1
/// across stratified folds, refitted on all training rows.
pub fn linear_probe_classify(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome<ClassificationMetrics>> {
    let present = (0..n_classes).filter(|c| train_y.contains(c)).count();
    if present < 2 {
        return Err(Error::InvalidTask("training labels hold a single class".into()));
    }
    check_folds(cfg, train_x.len())?;
    let scaler = StandardScaler::fit(train_x)?;
    let xs = scaler.transform(train_x)?;
    let xt = scaler.transform(test_x)?;
    let fold = kfold_assign(xs.len(), cfg.folds, Some(train_y), cfg.seed);

    let mut cv_scores = Vec::new();
    for &c in &LOGISTIC_C_GRID {
        // A fit that converges before the smaller cap is identical under the larger one.
        let mut previous: Option<(Vec<f64>, bool)> = None;
        for &max_iter in &LOGISTIC_MAX_ITER_GRID {
            let score = match &previous {
                Some((scores, true)) => crate::util::mean(scores),
                _ => {
                    let mut fold_scores = Vec::with_capacity(cfg.folds);
                    let mut all_converged = true;
                    for f in 0..cfg.folds {
                        let (tr, va) = split_folds(&fold, f);
                        let m = fit_logistic(&select(&xs, &tr), &select(train_y, &tr), n_classes, c, max_iter)?;
                        all_converged &= m.converged && m.iters < max_iter;
                        let xv = select(&xs, &va);
                        let yv = select(train_y, &va);
                        let probs = m.predict_proba(&xv);
                        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
                        fold_scores.push(classification_metrics(&yv, &pred, &probs, n_classes)?.macro_f1);
                    }
                    let s = crate::util::mean(&fold_scores);
                    previous = Some((fold_scores, all_converged));
                    s
                }
            };
            cv_scores.push((GridParams::Logistic { c, max_iter }, score));
        }
    }
    let best = best_of(&cv_scores);
    let GridParams::Logistic { c, max_iter } = best else { unreachable!("logistic grid") };
    let model = fit_logistic(&xs, train_y, n_classes, c, max_iter)?;
    let probs = model.predict_proba(&xt);
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let metrics = classification_metrics(test_y, &pred, &probs, n_classes)?;
    Ok(ProbeOutcome { metrics, best, cv_scores })
}

/// Ridge probe over the alpha × solver grid, scored by negative MSE.
pub fn linear_probe_regress(
    train_x: &[Vec<f64>],
    train_y: &[f64],
    test_x: &[Vec<f64>],
    test_y: &[f64],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome<RegressionMetrics>> {
    check_folds(cfg, train_x.len())?;
    if train_y.iter().all(|&v| v == train_y[0]) {
        log::warn!("regression targets are constant; the probe degenerates to the mean");
    }
    let scaler = StandardScaler::fit(train_x)?;
    let xs = scaler.transform(train_x)?;
    let xt = scaler.transform(test_x)?;
    let fold = kfold_assign(xs.len(), cfg.folds, None, cfg.seed);
    let mut cv_scores = Vec::new();
    for params in ridge_grid() {
        let GridParams::Ridge { alpha, solver } = params else { unreachable!("ridge grid") };
        let mut fold_scores = Vec::with_capacity(cfg.folds);
        for f in 0..cfg.folds {
            let (tr, va) = split_folds(&fold, f);
            let m = fit_ridge(&select(&xs, &tr), &select(train_y, &tr), alpha, solver)?;
            let pred = m.predict(&select(&xs, &va));
            fold_scores.push(-regression_metrics(&select(train_y, &va), &pred)?.mse);
        }
        cv_scores.push((params, crate::util::mean(&fold_scores)));
    }
    let best = best_of(&cv_scores);
    let GridParams::Ridge { alpha, solver } = best else { unreachable!("ridge grid") };
    let model = fit_ridge(&xs, train_y, alpha, solver)?;
    let metrics = regression_metrics(test_y, &model.predict(&xt))?;
    Ok(ProbeOutcome { metrics, best, cv_scores })
}
