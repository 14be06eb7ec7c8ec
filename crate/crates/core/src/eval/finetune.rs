//! End-to-end fine-tuning with a task head.
//!
//! Classification: layer norm then a linear map to class logits, trained on
//! a weighted sum of cross-entropy, soft-F1 and Dice losses. Regression: a
//! 128-unit GELU MLP trained on MSE. Encoder and head have separate Adam
//! learning rates; the epoch with the best validation macro F1 (or lowest
//! validation MAE) is kept for the test split.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::{argmax, classification_metrics, regression_metrics};
use super::report::Metrics;
use crate::encoder::EncoderModel;
use crate::error::{invalid, Error, Result};
use crate::nn::{gelu, gelu_grad, Adam, AdamConfig, LayerNorm, Linear, ParamStore};
use crate::signal::PpgWindow;
use crate::util::{par_map, rng_for, shuffle};

const SOFT_F1_EPS: f64 = 1e-8;
const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub encoder_lr: f64,
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weights of cross-entropy, soft-F1 and Dice.
    pub loss_weights: [f64; 3],
    pub regression_hidden: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            encoder_lr: 1e-4,
            head_lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            loss_weights: [1.0 / 3.0; 3],
            regression_hidden: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => {
                Targets::Classes { labels: idx.iter().map(|&i| labels[i]).collect(), n_classes: *n_classes }
            }
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Head {
    Classification { norm: LayerNorm, linear: Linear },
    Regression { hidden: Linear, out: Linear },
}

/// A task head and its parameters.
#[derive(Clone, Debug)]
pub struct HeadModel {
    pub head: Head,
    pub params: ParamStore,
}

struct HeadCache {
    input: Array2<f64>,
    normed: Vec<(Vec<f64>, f64)>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

impl HeadModel {
    pub fn classification(dim: usize, n_classes: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, &[0x4844]);
        let norm = LayerNorm::new(&mut params, "head.norm", dim);
        let linear = Linear::new(&mut params, "head.linear", dim, n_classes, &mut rng);
        Self { head: Head::Classification { norm, linear }, params }
    }

    pub fn regression(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = rng_for(seed, &[0x4844]);
        let h = Linear::new(&mut params, "head.hidden", dim, hidden, &mut rng);
        let out = Linear::new(&mut params, "head.out", hidden, 1, &mut rng);
        Self { head: Head::Regression { hidden: h, out }, params }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Outputs for a `dim × n` batch of embeddings: logits (`k × n`) or
    /// predictions (`1 × n`).
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward_cached(x).0
    }

    fn forward_cached(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let p = self.params.values();
        match &self.head {
            Head::Classification { norm, linear } => {
                let mut y = Array2::zeros(x.raw_dim());
                let mut normed = Vec::with_capacity(x.ncols());
                for (i, col) in x.axis_iter(Axis(1)).enumerate() {
                    let (out, yhat, inv) = norm.forward(p, &col.to_vec());
                    y.column_mut(i).assign(&ndarray::Array1::from(out));
                    normed.push((yhat, inv));
                }
                let z = linear.forward(p, y.view());
                (z, HeadCache { input: y, normed, hidden_pre: Array2::zeros((0, 0)), hidden: Array2::zeros((0, 0)) })
            }
            Head::Regression { hidden, out } => {
                let pre = hidden.forward(p, x.view());
                let h = pre.mapv(gelu);
                let z = out.forward(p, h.view());
                (z, HeadCache { input: x.clone(), normed: Vec::new(), hidden_pre: pre, hidden: h })
            }
        }
    }

    /// Accumulates head gradients into `g` and returns d(loss)/d(embeddings).
    fn backward(&self, g: &mut [f64], cache: &HeadCache, dz: &Array2<f64>) -> Array2<f64> {
        let p = self.params.values();
        match &self.head {
            Head::Classification { norm, linear } => {
                let dy = linear.backward(p, g, cache.input.view(), dz.view());
                let mut dx = Array2::zeros(dy.raw_dim());
                for (i, (yhat, inv)) in cache.normed.iter().enumerate() {
                    let d = norm.backward(p, g, yhat, *inv, &dy.column(i).to_vec());
                    dx.column_mut(i).assign(&ndarray::Array1::from(d));
                }
                dx
            }
            Head::Regression { hidden, out } => {
                let dh = out.backward(p, g, cache.hidden.view(), dz.view());
                let dpre = &dh * &cache.hidden_pre.mapv(gelu_grad);
                hidden.backward(p, g, cache.input.view(), dpre.view())
            }
        }
    }
}

fn softmax_cols(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut col in p.axis_iter_mut(Axis(1)) {
        let m = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - m).exp());
        let s = col.sum();
        col.mapv_inplace(|v| v / s);
    }
    p
}

/// Soft-F1 loss over a batch, `1 − mean_c 2Σp·y / (Σp + Σy + ε)`, with its
/// gradient with respect to the probabilities (`k × n`).
pub fn soft_f1_loss(probs: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (k, n) = probs.dim();
    let mut grad = Array2::zeros((k, n));
    let mut total = 0.0;
    for c in 0..k {
        let s: f64 = (0..n).filter(|&i| labels[i] == c).map(|i| probs[[c, i]]).sum();
        let ps: f64 = probs.row(c).sum();
        let ys = labels.iter().filter(|&&l| l == c).count() as f64;
        let den = ps + ys + SOFT_F1_EPS;
        total += 2.0 * s / den;
        for i in 0..n {
            let y = if labels[i] == c { 1.0 } else { 0.0 };
            grad[[c, i]] = -(2.0 * y * den - 2.0 * s) / (den * den) / k as f64;
        }
    }
    (1.0 - total / k as f64, grad)
}

/// Per-sample Dice loss, `1 − (2Σ_c p·y + γ) / (Σ_c p + Σ_c y + γ)`, averaged
/// over the batch.
pub fn dice_loss(probs: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let (k, n) = probs.dim();
    let mut grad = Array2::zeros((k, n));
    let mut total = 0.0;
    for i in 0..n {
        let num = 2.0 * probs[[labels[i], i]] + DICE_SMOOTH;
        let den = probs.column(i).sum() + 1.0 + DICE_SMOOTH;
        total += 1.0 - num / den;
        for c in 0..k {
            let y = if labels[i] == c { 1.0 } else { 0.0 };
            grad[[c, i]] = -(2.0 * y * den - num) / (den * den) / n as f64;
        }
    }
    (total / n as f64, grad)
}

/// Weighted classification loss and its gradient with respect to logits.
pub fn classification_loss(logits: &Array2<f64>, labels: &[usize], weights: [f64; 3]) -> (f64, Array2<f64>) {
    let n = logits.ncols() as f64;
    let p = softmax_cols(logits);
    let ce = labels.iter().enumerate().map(|(i, &c)| -p[[c, i]].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / n;
    let (f1, df1) = soft_f1_loss(&p, labels);
    let (dice, ddice) = dice_loss(&p, labels);
    let dp = &df1 * weights[1] + &ddice * weights[2];
    let mut dz = Array2::zeros(p.raw_dim());
    for i in 0..p.ncols() {
        let pc = p.column(i);
        let dpc = dp.column(i);
        let inner: f64 = pc.iter().zip(dpc.iter()).map(|(a, b)| a * b).sum();
        for c in 0..p.nrows() {
            let onehot = if labels[i] == c { 1.0 } else { 0.0 };
            dz[[c, i]] = weights[0] * (pc[c] - onehot) / n + pc[c] * (dpc[c] - inner);
        }
    }
    (weights[0] * ce + weights[1] * f1 + weights[2] * dice, dz)
}

/// Rows fed to the head: raw windows (encoded on the fly) or fixed embeddings.
#[derive(Clone, Copy, Debug)]
pub enum Rows<'a> {
    Windows(&'a [PpgWindow]),
    Embeddings(&'a [Vec<f64>]),
}

impl Rows<'_> {
    fn len(&self) -> usize {
        match self {
            Rows::Windows(w) => w.len(),
            Rows::Embeddings(e) => e.len(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_score: Vec<f64>,
    pub head: HeadModel,
    pub encoder: Option<EncoderModel>,
}

fn embed_rows(encoder: Option<&EncoderModel>, rows: Rows<'_>, idx: &[usize]) -> Result<Vec<Vec<f64>>> {
    match rows {
        Rows::Embeddings(e) => Ok(idx.iter().map(|&i| e[i].clone()).collect()),
        Rows::Windows(w) => {
            let enc = encoder.ok_or_else(|| invalid("window rows need an encoder"))?;
            par_map(idx, |&i| enc.embed_values(&w[i].values)).into_iter().collect()
        }
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((d, rows.len()), |(j, i)| rows[i][j])
}

fn loss_and_grad(head: &HeadModel, x: &Array2<f64>, y: &Targets, cfg: &FinetuneConfig) -> (f64, Vec<f64>, Array2<f64>) {
    let (z, cache) = head.forward_cached(x);
    let (loss, dz) = match y {
        Targets::Classes { labels, .. } => classification_loss(&z, labels, cfg.loss_weights),
        Targets::Values(v) => {
            let n = v.len() as f64;
            let diff: Vec<f64> = z.row(0).iter().zip(v).map(|(p, t)| p - t).collect();
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            let dz = Array2::from_shape_fn((1, v.len()), |(_, i)| 2.0 * diff[i] / n);
            (loss, dz)
        }
    };
    let mut g = head.params.zeros();
    let dx = head.backward(&mut g, &cache, &dz);
    (loss, g, dx)
}

fn evaluate(head: &HeadModel, emb: &[Vec<f64>], y: &Targets) -> Result<Metrics> {
    let z = head.forward(&to_matrix(emb));
    match y {
        Targets::Classes { labels, n_classes } => {
            let p = softmax_cols(&z);
            let scores: Vec<Vec<f64>> = p.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
            let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
            Ok(Metrics::Classification(classification_metrics(labels, &pred, &scores, *n_classes)?))
        }
        Targets::Values(v) => Ok(Metrics::Regression(regression_metrics(v, &z.row(0).to_vec())?)),
    }
}

/// Higher is better.
fn selection_score(m: &Metrics) -> f64 {
    match m {
        Metrics::Classification(c) => c.macro_f1,
        Metrics::Regression(r) => -r.mae,
    }
}

/// Fine-tunes `encoder` end to end on `train`, selecting the epoch by the
/// validation split and reporting test metrics from that epoch.
pub fn finetune(
    encoder: &EncoderModel,
    train: (&[PpgWindow], &Targets),
    val: (&[PpgWindow], &Targets),
    test: (&[PpgWindow], &Targets),
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    run(
        Some(encoder.clone()),
        encoder.embedding_dim(),
        (Rows::Windows(train.0), train.1),
        (Rows::Windows(val.0), val.1),
        (Rows::Windows(test.0), test.1),
        cfg,
    )
}

/// Trains only the head on fixed embeddings, with the same schedule and
/// selection rule as [`finetune`].
pub fn train_head(
    train: (&[Vec<f64>], &Targets),
    val: (&[Vec<f64>], &Targets),
    test: (&[Vec<f64>], &Targets),
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    let dim = train.0.first().map(Vec::len).ok_or_else(|| invalid("empty training split"))?;
    run(
        None,
        dim,
        (Rows::Embeddings(train.0), train.1),
        (Rows::Embeddings(val.0), val.1),
        (Rows::Embeddings(test.0), test.1),
        cfg,
    )
}

fn run(
    mut encoder: Option<EncoderModel>,
    dim: usize,
    train: (Rows<'_>, &Targets),
    val: (Rows<'_>, &Targets),
    test: (Rows<'_>, &Targets),
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    for (rows, y) in [&train, &val, &test] {
        if rows.len() != y.len() || y.is_empty() {
            return Err(invalid("every split needs rows aligned with targets"));
        }
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(invalid("batch_size and epochs must be positive"));
    }
    let mut head = match train.1 {
        Targets::Classes { n_classes, .. } => HeadModel::classification(dim, *n_classes, cfg.seed),
        Targets::Values(_) => HeadModel::regression(dim, cfg.regression_hidden, cfg.seed),
    };
    let mut head_adam = Adam::new(AdamConfig::with_lr(cfg.head_lr), head.num_params());
    let mut enc_adam = encoder.as_ref().map(|e| Adam::new(AdamConfig::with_lr(cfg.encoder_lr), e.params.len()));

    let all_val: Vec<usize> = (0..val.0.len()).collect();
    let mut best: Option<(f64, usize, HeadModel, Option<EncoderModel>)> = None;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_score = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(cfg.seed, &[0x4654, epoch as u64]);
        let mut order: Vec<usize> = (0..train.0.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let emb = embed_rows(encoder.as_ref(), train.0, batch)?;
            let y = train.1.subset(batch);
            let (loss, g_head, demb) = loss_and_grad(&head, &to_matrix(&emb), &y, cfg);
            if !loss.is_finite() {
                let mut history = train_loss.clone();
                history.push(loss);
                return Err(Error::TrainingDiverged { epoch, history });
            }
            if let (Some(enc), Some(adam), Rows::Windows(ws)) = (encoder.as_mut(), enc_adam.as_mut(), train.0) {
                let d: Vec<Vec<f64>> = demb.axis_iter(Axis(1)).map(|c| c.to_vec()).collect();
                let items: Vec<(&[f64], &[f64])> = batch.iter().zip(&d).map(|(&i, di)| (ws[i].values.as_slice(), di.as_slice())).collect();
                let g_enc = enc.batch_param_grad(&items)?;
                adam.step(enc.params.values_mut(), &g_enc);
            }
            head_adam.step(head.params.values_mut(), &g_head);
            losses.push(loss);
        }
        train_loss.push(crate::util::mean(&losses));
        let score = selection_score(&evaluate(&head, &embed_rows(encoder.as_ref(), val.0, &all_val)?, val.1)?);
        val_score.push(score);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, epoch, head.clone(), encoder.clone()));
        }
    }
    let (_, best_epoch, head, encoder) = best.expect("at least one epoch");
    let all_test: Vec<usize> = (0..test.0.len()).collect();
    let metrics = evaluate(&head, &embed_rows(encoder.as_ref(), test.0, &all_test)?, test.1)?;
    Ok(FinetuneOutcome { metrics, best_epoch, train_loss, val_score, head, encoder })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_shapes() {
        let h = HeadModel::classification(512, 3, 0);
        assert_eq!(h.num_params(), 512 * 3 + 3 + 2 * 512);
        let r = HeadModel::regression(512, 128, 0);
        assert_eq!(r.num_params(), 512 * 128 + 128 + 128 + 1);
        let x = Array2::from_elem((512, 4), 0.1);
        assert_eq!(h.forward(&x).dim(), (3, 4));
        assert_eq!(r.forward(&x).dim(), (1, 4));
    }

    #[test]
    fn losses_fall_as_true_class_probability_rises() {
        let labels = [0usize, 1];
        let mk = |q: f64| Array2::from_shape_vec((2, 2), vec![q, 1.0 - q, 1.0 - q, q]).unwrap();
        let (f_lo, _) = soft_f1_loss(&mk(0.6), &labels);
        let (f_hi, _) = soft_f1_loss(&mk(0.9), &labels);
        let (d_lo, _) = dice_loss(&mk(0.6), &labels);
        let (d_hi, _) = dice_loss(&mk(0.9), &labels);
        assert!(f_hi < f_lo && d_hi < d_lo);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = Array2::from_shape_vec((3, 4), vec![0.2, -0.5, 1.0, 0.3, 0.7, 0.1, -0.2, 0.0, -1.0, 0.4, 0.5, 0.9]).unwrap();
        let labels = [0usize, 2, 1, 1];
        let w = [0.5, 0.3, 0.2];
        let (_, dz) = classification_loss(&z, &labels, w);
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (2, 3), (0, 1)] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let num = (classification_loss(&zp, &labels, w).0 - classification_loss(&zm, &labels, w).0) / (2.0 * h);
            assert!((num - dz[idx]).abs() < 1e-7, "{idx:?}: {num} vs {}", dz[idx]);
        }
    }

    #[test]
    fn head_only_training_separates_blobs() {
        let mk = |n: usize, off: f64| -> (Vec<Vec<f64>>, Targets) {
            let x: Vec<Vec<f64>> = (0..n).map(|i| vec![if i % 2 == 0 { -1.0 } else { 1.0 } + off * (i as f64).sin(), 0.3]).collect();
            (x, Targets::Classes { labels: (0..n).map(|i| i % 2).collect(), n_classes: 2 })
        };
        let (a, ya) = mk(40, 0.2);
        let (b, yb) = mk(10, 0.1);
        let cfg = FinetuneConfig { epochs: 30, head_lr: 1e-2, batch_size: 8, ..Default::default() };
        let out = train_head((&a, &ya), (&b, &yb), (&b, &yb), &cfg).unwrap();
        let Metrics::Classification(m) = out.metrics else { panic!("classification expected") };
        assert_eq!(m.accuracy, 1.0);
    }
}
