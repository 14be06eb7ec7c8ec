//! Learnable motif-based distance.
//!
//! Three dilated-convolution feature networks (query, key, value) feed a
//! single-head cross-attention block. The anchor is reconstructed from the
//! candidate's values by kernel regression over stride-subsampled positions,
//! and the mean squared reconstruction error is the distance. Training masks a
//! contiguous run of the query window and scores only the masked positions.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{relu_backward_inplace, relu_inplace, Adam, AdamConfig, Conv1d, InstanceNorm, Linear, ParamStore, PartialConv1d, PartialConvOutput};
use crate::signal::{make_mask, MaskSpec, PpgWindow};
use crate::util::{add_assign, par_map, rng_for, scale as scale_slice, shuffle};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceConfig {
    pub kernel: usize,
    pub filters: usize,
    /// Number of dilated blocks; dilation doubles from 1.
    pub blocks: usize,
    /// Channel groups of the dilated convolutions.
    pub groups: usize,
    /// Attention subsampling stride.
    pub stride: usize,
    pub rate_hz: f64,
    pub instance_norm: bool,
    pub aggregate: Aggregate,
}

impl Default for DistanceConfig {
    fn default() -> Self {
        Self {
            kernel: 15,
            filters: 64,
            blocks: 5,
            groups: 8,
            stride: 10,
            rate_hz: 50.0,
            instance_norm: true,
            aggregate: Aggregate::Mean,
        }
    }
}

impl DistanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.filters == 0 || self.stride == 0 || self.groups == 0 {
            return Err(invalid("distance kernel, filters, groups and stride must be positive"));
        }
        if self.filters % self.groups != 0 {
            return Err(invalid(format!("filters ({}) must be divisible by groups ({})", self.filters, self.groups)));
        }
        if !(self.rate_hz > 0.0) {
            return Err(invalid("distance rate_hz must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Query,
    Key,
    Value,
}

/// Residual dilated convolution blocks: `h <- norm(relu(conv_d(h) + h))`.
#[derive(Clone, Debug)]
pub struct DilatedStack {
    pub convs: Vec<Conv1d>,
    pub norm: Option<InstanceNorm>,
}

#[derive(Clone, Debug)]
struct StackCache {
    inputs: Vec<Array2<f64>>,
    relu: Vec<Array2<f64>>,
    out: Array2<f64>,
    inv_std: Vec<Vec<f64>>,
}

impl DilatedStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        blocks: usize,
        groups: usize,
        instance_norm: bool,
        rng: &mut R,
    ) -> Self {
        let convs = (0..blocks)
            .map(|b| Conv1d::new(store, &format!("{name}.block{b}"), channels, channels, kernel, 1, 1 << b, groups, true, rng))
            .collect();
        Self { convs, norm: instance_norm.then(InstanceNorm::default) }
    }

    /// Number of input samples that influence one output sample.
    pub fn receptive_field(&self) -> usize {
        1 + self.convs.iter().map(|c| (c.kernel - 1) * c.dilation).sum::<usize>()
    }

    fn block(&self, p: &[f64], conv: &Conv1d, h: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
        let mut z = conv.forward(p, h);
        z += &h;
        relu_inplace(z.view_mut());
        match &self.norm {
            Some(n) => {
                let (y, inv) = n.forward(z.view());
                (z, y, inv)
            }
            None => (z.clone(), z, Vec::new()),
        }
    }

    pub fn forward(&self, p: &[f64], h: Array2<f64>) -> Array2<f64> {
        self.convs.iter().fold(h, |h, conv| self.block(p, conv, h.view()).1)
    }

    fn forward_cached(&self, p: &[f64], h: Array2<f64>) -> StackCache {
        let mut inputs = Vec::with_capacity(self.convs.len());
        let mut relu = Vec::with_capacity(self.convs.len());
        let mut inv_std = Vec::with_capacity(self.convs.len());
        let mut cur = h;
        for conv in &self.convs {
            let (r, y, inv) = self.block(p, conv, cur.view());
            inputs.push(cur);
            relu.push(r);
            inv_std.push(inv);
            cur = y;
        }
        StackCache { inputs, relu, out: cur, inv_std }
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &StackCache, dy: Array2<f64>) -> Array2<f64> {
        let mut d = dy;
        for b in (0..self.convs.len()).rev() {
            let mut dz = match &self.norm {
                Some(n) => {
                    let y = if b + 1 < self.convs.len() { cache.inputs[b + 1].view() } else { cache.out.view() };
                    n.backward(y, &cache.inv_std[b], d.view())
                }
                None => d,
            };
            relu_backward_inplace(cache.relu[b].view(), dz.view_mut());
            let dh = self.convs[b].backward(p, g, cache.inputs[b].view(), dz.view());
            d = dz + dh;
        }
        d
    }
}

/// Partial-convolution input layer followed by a [`DilatedStack`].
#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub input: PartialConv1d,
    pub stack: DilatedStack,
}

struct FeatureCache {
    x: Array2<f64>,
    mask: Vec<bool>,
    pc: PartialConvOutput,
    stack: StackCache,
}

impl FeatureNet {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &DistanceConfig, rng: &mut R) -> Self {
        let input = PartialConv1d::new(store, &format!("{name}.input"), 1, cfg.filters, cfg.kernel, 1, 1, rng);
        let stack = DilatedStack::new(store, name, cfg.filters, cfg.kernel, cfg.blocks, cfg.groups, cfg.instance_norm, rng);
        Self { input, stack }
    }

    pub fn receptive_field(&self) -> usize {
        self.stack.receptive_field() + self.input.conv.span() - 1
    }

    fn forward(&self, p: &[f64], x: &[f64], mask: &[bool]) -> (Array2<f64>, Vec<bool>) {
        let xa = ArrayView2::from_shape((1, x.len()), x).expect("1×T view");
        let pc = self.input.forward(p, xa, mask);
        (self.stack.forward(p, pc.y), pc.out_mask)
    }

    fn forward_cached(&self, p: &[f64], x: &[f64], mask: &[bool]) -> FeatureCache {
        let xa = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("1×T");
        let pc = self.input.forward(p, xa.view(), mask);
        let stack = self.stack.forward_cached(p, pc.y.clone());
        FeatureCache { x: xa, mask: mask.to_vec(), pc, stack }
    }

    fn backward(&self, p: &[f64], g: &mut [f64], cache: &FeatureCache, dfeat: Array2<f64>) {
        let dh = self.stack.backward(p, g, &cache.stack, dfeat);
        self.input.backward(p, g, cache.x.view(), &cache.mask, &cache.pc, dh.view());
    }
}

/// Feature sequence of one window: `filters × T`, with positions whose
/// receptive field was entirely unobserved flagged `false`.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub values: Array2<f64>,
    pub covered: Vec<bool>,
}

/// Projected features of one window at the subsampled attention positions.
#[derive(Clone, Debug)]
pub struct WindowFeatures {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Vec<f64>,
    /// Sample index of each subsampled position.
    pub positions: Vec<usize>,
    /// Window values at `positions`.
    pub targets: Vec<f64>,
    /// Observation flags at `positions`.
    pub observed: Vec<bool>,
    pub rate_hz: f64,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    /// Reconstructed anchor values at the scored positions.
    pub reconstruction: Vec<f64>,
    /// Sample indices of the scored positions.
    pub scored_positions: Vec<usize>,
    pub distance: f64,
    /// Softmax weights, scored query rows × subsampled key columns.
    pub attention: Option<Array2<f64>>,
}

/// Row-softmax attention of queries over keys followed by kernel regression of `value`.
fn attend(scale: f64, q: ArrayView2<f64>, k: ArrayView2<f64>, value: &[f64]) -> (Array2<f64>, Vec<f64>) {
    let mut a = q.t().dot(&k);
    for mut row in a.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * scale));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v * scale - max).exp();
            sum += e;
            e
        });
        row /= sum;
    }
    let recon = a.axis_iter(Axis(0)).map(|row| row.iter().zip(value).map(|(w, v)| w * v).sum()).collect();
    (a, recon)
}

fn aggregate(agg: Aggregate, sq: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for v in sq {
        n += 1;
        s += v;
    }
    match agg {
        Aggregate::Sum => s,
        Aggregate::Mean if n > 0 => s / n as f64,
        Aggregate::Mean => 0.0,
    }
}

#[derive(Clone, Debug)]
pub struct DistanceModel {
    pub cfg: DistanceConfig,
    pub params: ParamStore,
    nets: [FeatureNet; 3],
    proj_q: Linear,
    proj_k: Linear,
    value_out: Linear,
    frozen: bool,
}

impl DistanceModel {
    pub fn new(cfg: DistanceConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0xd157]);
        let mut params = ParamStore::new();
        let nets = [
            FeatureNet::new(&mut params, "f_q", &cfg, &mut rng),
            FeatureNet::new(&mut params, "f_k", &cfg, &mut rng),
            FeatureNet::new(&mut params, "f_v", &cfg, &mut rng),
        ];
        let proj_q = Linear::new(&mut params, "proj_q", cfg.filters, cfg.filters, &mut rng);
        let proj_k = Linear::new(&mut params, "proj_k", cfg.filters, cfg.filters, &mut rng);
        let value_out = Linear::new(&mut params, "value_out", cfg.filters, 1, &mut rng);
        Ok(Self { cfg, params, nets, proj_q, proj_k, value_out, frozen: false })
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn receptive_field(&self) -> usize {
        self.nets[0].receptive_field()
    }

    fn scale(&self) -> f64 {
        1.0 / (self.cfg.filters as f64).sqrt()
    }

    fn net(&self, role: Role) -> &FeatureNet {
        match role {
            Role::Query => &self.nets[0],
            Role::Key => &self.nets[1],
            Role::Value => &self.nets[2],
        }
    }

    fn check_window(&self, w: &PpgWindow) -> Result<()> {
        w.validate()?;
        if w.len() < self.cfg.kernel {
            return Err(invalid(format!("window of {} samples is shorter than the kernel ({})", w.len(), self.cfg.kernel)));
        }
        if (w.rate_hz - self.cfg.rate_hz).abs() > 1e-9 {
            return Err(invalid(format!("window rate {} Hz does not match model rate {} Hz", w.rate_hz, self.cfg.rate_hz)));
        }
        Ok(())
    }

    fn grid(&self, t: usize) -> Vec<usize> {
        (0..t).step_by(self.cfg.stride).collect()
    }

    /// Full-resolution features of one role network.
    pub fn features(&self, w: &PpgWindow, role: Role) -> Result<FeatureMap> {
        self.check_window(w)?;
        let (values, covered) = self.net(role).forward(self.params.values(), &w.values, &w.observed);
        Ok(FeatureMap { values, covered })
    }

    /// Runs all three feature networks over the full window, then keeps and
    /// projects the stride-subsampled positions.
    pub fn window_features(&self, w: &PpgWindow) -> Result<WindowFeatures> {
        self.check_window(w)?;
        let p = self.params.values();
        let positions = self.grid(w.len());
        let sub = |role: Role| {
            let (f, _) = self.net(role).forward(p, &w.values, &w.observed);
            f.select(Axis(1), &positions)
        };
        let query = self.proj_q.forward(p, sub(Role::Query).view());
        let key = self.proj_k.forward(p, sub(Role::Key).view());
        let value = self.value_out.forward(p, sub(Role::Value).view()).into_raw_vec_and_offset().0;
        Ok(WindowFeatures {
            query,
            key,
            value,
            targets: positions.iter().map(|&i| w.values[i]).collect(),
            observed: positions.iter().map(|&i| w.observed[i]).collect(),
            positions,
            rate_hz: w.rate_hz,
        })
    }

    /// Kernel-regression reconstruction of `anchor` from `cand`, scoring every
    /// observed subsampled anchor position.
    pub fn reconstruct_features(&self, anchor: &WindowFeatures, cand: &WindowFeatures, keep_attention: bool) -> Result<ReconstructionResult> {
        if (anchor.rate_hz - cand.rate_hz).abs() > 1e-9 {
            return Err(invalid("anchor and candidate rates differ"));
        }
        let rows: Vec<usize> = (0..anchor.positions.len()).filter(|&i| anchor.observed[i]).collect();
        let q = anchor.query.select(Axis(1), &rows);
        let (a, recon) = attend(self.scale(), q.view(), cand.key.view(), &cand.value);
        let distance = aggregate(self.cfg.aggregate, rows.iter().zip(&recon).map(|(&i, r)| (r - anchor.targets[i]).powi(2)));
        Ok(ReconstructionResult {
            reconstruction: recon,
            scored_positions: rows.iter().map(|&i| anchor.positions[i]).collect(),
            distance,
            attention: keep_attention.then_some(a),
        })
    }

    pub fn cross_attn_reconstruct(&self, anchor: &PpgWindow, cand: &PpgWindow) -> Result<ReconstructionResult> {
        if (anchor.rate_hz - cand.rate_hz).abs() > 1e-9 {
            return Err(invalid(format!("rate mismatch: anchor {} Hz, candidate {} Hz", anchor.rate_hz, cand.rate_hz)));
        }
        let a = self.window_features(anchor)?;
        let c = self.window_features(cand)?;
        self.reconstruct_features(&a, &c, true)
    }

    /// Static distance used by the contrastive stage; the model must be frozen.
    pub fn distance(&self, anchor: &PpgWindow, cand: &PpgWindow) -> Result<f64> {
        self.require_frozen()?;
        Ok(self.cross_attn_reconstruct(anchor, cand)?.distance)
    }

    pub fn distance_features(&self, anchor: &WindowFeatures, cand: &WindowFeatures) -> Result<f64> {
        self.require_frozen()?;
        Ok(self.reconstruct_features(anchor, cand, false)?.distance)
    }

    pub fn require_frozen(&self) -> Result<()> {
        if self.frozen {
            Ok(())
        } else {
            Err(Error::Misuse("distance model must be frozen before it is used as a distance".into()))
        }
    }

    fn scored_positions(&self, mask: &[bool]) -> Result<Vec<usize>> {
        let rows: Vec<usize> = self.grid(mask.len()).into_iter().filter(|&i| !mask[i]).collect();
        if rows.is_empty() {
            return Err(invalid(format!("mask covers no position of the stride-{} attention grid", self.cfg.stride)));
        }
        Ok(rows)
    }

    /// Masked-reconstruction loss: the query side sees `w` with `mask`
    /// applied, keys and values see the intact window, and only masked
    /// positions on the attention grid are scored.
    pub fn masked_loss(&self, w: &PpgWindow, mask: &[bool]) -> Result<f64> {
        Ok(self.masked_pass(w, mask, None)?.0)
    }

    /// Loss and its gradient with respect to every parameter.
    pub fn masked_loss_grad(&self, w: &PpgWindow, mask: &[bool]) -> Result<(f64, Vec<f64>)> {
        let mut g = self.params.zeros();
        let (loss, _) = self.masked_pass(w, mask, Some(&mut g))?;
        Ok((loss, g))
    }

    /// Returns the loss and the number of scored positions.
    fn masked_pass(&self, w: &PpgWindow, mask: &[bool], grads: Option<&mut Vec<f64>>) -> Result<(f64, usize)> {
        self.check_window(w)?;
        let masked = w.with_mask(mask)?;
        let rows = self.scored_positions(mask)?;
        let grid = self.grid(w.len());
        let p = self.params.values();
        let cq = self.nets[0].forward_cached(p, &masked.values, &masked.observed);
        let ck = self.nets[1].forward_cached(p, &w.values, &w.observed);
        let cv = self.nets[2].forward_cached(p, &w.values, &w.observed);
        let fq = cq.stack.out.select(Axis(1), &rows);
        let fk = ck.stack.out.select(Axis(1), &grid);
        let fv = cv.stack.out.select(Axis(1), &grid);
        let q = self.proj_q.forward(p, fq.view());
        let k = self.proj_k.forward(p, fk.view());
        let v = self.value_out.forward(p, fv.view());
        let vals = v.as_slice().expect("contiguous");
        let (a, recon) = attend(self.scale(), q.view(), k.view(), vals);
        let resid: Vec<f64> = rows.iter().zip(&recon).map(|(&i, r)| r - w.values[i]).collect();
        let n = resid.len() as f64;
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;

        let Some(g) = grads else {
            return Ok((loss, rows.len()));
        };
        let drecon: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
        // recon_i = sum_j A_ij v_j
        let mut dv = Array2::<f64>::zeros((1, vals.len()));
        let mut ds = Array2::<f64>::zeros(a.raw_dim());
        for (i, (arow, &dr)) in a.axis_iter(Axis(0)).zip(&drecon).enumerate() {
            let mut dot = 0.0;
            for (j, &aij) in arow.iter().enumerate() {
                dv[[0, j]] += aij * dr;
                dot += aij * dr * vals[j];
            }
            for (j, &aij) in arow.iter().enumerate() {
                ds[[i, j]] = aij * (dr * vals[j] - dot);
            }
        }
        let sc = self.scale();
        let dq = k.dot(&ds.t()) * sc;
        let dk = q.dot(&ds) * sc;
        let dfq_s = self.proj_q.backward(p, g, fq.view(), dq.view());
        let dfk_s = self.proj_k.backward(p, g, fk.view(), dk.view());
        let dfv_s = self.value_out.backward(p, g, fv.view(), dv.view());
        let scatter = |d: &Array2<f64>, cols: &[usize]| {
            let mut full = Array2::zeros((self.cfg.filters, w.len()));
            for (c, &t) in cols.iter().enumerate() {
                full.column_mut(t).assign(&d.column(c));
            }
            full
        };
        self.nets[0].backward(p, g, &cq, scatter(&dfq_s, &rows));
        self.nets[1].backward(p, g, &ck, scatter(&dfk_s, &grid));
        self.nets[2].backward(p, g, &cv, scatter(&dfv_s, &grid));
        Ok((loss, rows.len()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "distance_model",
            "config": self.cfg,
            "frozen": self.frozen,
        }));
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("distance_model") {
            return Err(Error::Format("checkpoint does not hold a distance model".into()));
        }
        let cfg: DistanceConfig = serde_json::from_value(ck.header["config"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let mut m = Self::new(cfg, 0)?;
        ck.load_store("", &mut m.params)?;
        m.frozen = ck.header.get("frozen").and_then(|f| f.as_bool()).unwrap_or(false);
        Ok(m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistanceTrainConfig {
    pub model: DistanceConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mask_s: f64,
    pub seed: u64,
}

impl Default for DistanceTrainConfig {
    fn default() -> Self {
        Self { model: DistanceConfig::default(), epochs: 20, batch_size: 16, lr: 1e-3, mask_s: 2.0, seed: 0 }
    }
}

/// Stateful stage-1 optimiser; one call to [`DistanceTrainer::train_epoch`] per epoch.
#[derive(Clone, Debug)]
pub struct DistanceTrainer {
    pub cfg: DistanceTrainConfig,
    pub model: DistanceModel,
    pub adam: Adam,
    pub epoch: usize,
    pub history: Vec<f64>,
}

impl DistanceTrainer {
    pub fn new(cfg: DistanceTrainConfig) -> Result<Self> {
        let model = DistanceModel::new(cfg.model.clone(), cfg.seed)?;
        let adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.num_params());
        Ok(Self { cfg, model, adam, epoch: 0, history: Vec::new() })
    }

    fn check_corpus(&self, corpus: &[PpgWindow]) -> Result<()> {
        if corpus.is_empty() {
            return Err(invalid("empty training corpus"));
        }
        if corpus.iter().any(|w| (w.rate_hz - self.cfg.model.rate_hz).abs() > 1e-9) {
            return Err(invalid("corpus windows must share the model rate"));
        }
        Ok(())
    }

    /// One pass over `corpus` in a seeded random order with a fresh mask per
    /// example. Returns the epoch-aggregated (mean of batch means) loss.
    pub fn train_epoch(&mut self, corpus: &[PpgWindow]) -> Result<f64> {
        self.check_corpus(corpus)?;
        self.model.unfreeze();
        let mut rng = rng_for(self.cfg.seed, &[1, self.epoch as u64]);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        shuffle(&mut order, &mut rng);
        let mut batch_losses = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size.max(1)) {
            let jobs: Vec<(usize, u64)> = chunk.iter().map(|&i| (i, rng.random())).collect();
            let model = &self.model;
            let mask_s = self.cfg.mask_s;
            let results = par_map(&jobs, |&(i, seed)| -> Result<(f64, Vec<f64>)> {
                let w = &corpus[i];
                let mask = make_mask(w.len(), w.rate_hz, &MaskSpec::uniform(mask_s, seed))?;
                model.masked_loss_grad(w, &mask)
            });
            let mut grad = self.model.params.zeros();
            let mut loss = 0.0;
            for r in results {
                let (l, g) = r?;
                loss += l;
                add_assign(&mut grad, &g);
            }
            let n = chunk.len() as f64;
            loss /= n;
            scale_slice(&mut grad, 1.0 / n);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                let mut history = self.history.clone();
                history.push(loss);
                return Err(Error::TrainingDiverged { epoch: self.epoch, history });
            }
            self.adam.step(self.model.params.values_mut(), &grad);
            batch_losses.push(loss);
        }
        self.model.params.round_to_f32();
        self.adam.round_to_f32();
        let epoch_loss = crate::util::mean(&batch_losses);
        self.history.push(epoch_loss);
        self.epoch += 1;
        Ok(epoch_loss)
    }

    pub fn finish(mut self) -> (DistanceModel, Vec<f64>) {
        self.model.freeze();
        (self.model, self.history)
    }
}

/// Mean masked-reconstruction loss of `model` over `corpus` with masks drawn
/// from `seed`, one per window.
pub fn eval_masked_loss(model: &DistanceModel, corpus: &[PpgWindow], mask_s: f64, seed: u64) -> Result<f64> {
    let jobs: Vec<(usize, u64)> = {
        let mut rng = rng_for(seed, &[2]);
        (0..corpus.len()).map(|i| (i, rng.random())).collect()
    };
    let losses = par_map(&jobs, |&(i, s)| {
        let w = &corpus[i];
        let mask = make_mask(w.len(), w.rate_hz, &MaskSpec::uniform(mask_s, s))?;
        model.masked_loss(w, &mask)
    });
    let losses = losses.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(crate::util::mean(&losses))
}

/// Trains a distance model with masked reconstruction and returns it frozen
/// together with the per-epoch training loss.
pub fn train_distance(corpus: &[PpgWindow], cfg: &DistanceTrainConfig) -> Result<(DistanceModel, Vec<f64>)> {
    let mut trainer = DistanceTrainer::new(cfg.clone())?;
    for _ in 0..cfg.epochs {
        trainer.train_epoch(corpus)?;
    }
    Ok(trainer.finish())
}
