//! 1-D residual encoder mapping a variable-length window to one embedding.
//!
//! Input instance normalisation, a stem convolution, pre-activation basic
//! blocks (two convolutions each) whose width doubles every
//! `increase_every` blocks and whose first convolution downsamples every
//! `downsample_every` blocks, then global temporal pooling.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::checkpoint::Checkpoint;
use crate::nn::{relu_backward_inplace, relu_inplace, Conv1d, GroupNorm, InstanceNorm, ParamStore};
use crate::nn::GroupNormCache;
use crate::signal::PpgWindow;
use crate::util::{par_map, rng_for};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    Max,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub base_filters: usize,
    pub kernel: usize,
    /// Stride of the downsampling convolutions (and of the skip-path max pool).
    pub stride: usize,
    pub n_blocks: usize,
    /// Width doubles after this many blocks.
    pub increase_every: usize,
    /// Every `downsample_every`-th block downsamples.
    pub downsample_every: usize,
    /// Groups of the per-sample group normalisation inside the trunk.
    pub norm_groups: usize,
    pub pool: Pool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            base_filters: 128,
            kernel: 11,
            stride: 2,
            n_blocks: 12,
            increase_every: 4,
            downsample_every: 2,
            norm_groups: 1,
            pool: Pool::Max,
        }
    }
}

impl EncoderConfig {
    pub fn block_channels(&self, i: usize) -> usize {
        self.base_filters << (i / self.increase_every.max(1))
    }

    pub fn is_downsampling(&self, i: usize) -> bool {
        self.downsample_every > 0 && (i + 1) % self.downsample_every == 0
    }

    pub fn embedding_dim(&self) -> usize {
        if self.n_blocks == 0 {
            self.base_filters
        } else {
            self.block_channels(self.n_blocks - 1)
        }
    }

    /// Total temporal downsampling factor, which is also the minimum input length.
    pub fn min_len(&self) -> usize {
        let n = (0..self.n_blocks).filter(|&i| self.is_downsampling(i)).count();
        self.stride.max(1).pow(n as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(invalid("encoder base_filters, kernel and stride must be positive"));
        }
        if self.norm_groups == 0 || self.base_filters % self.norm_groups != 0 {
            return Err(invalid("norm_groups must divide base_filters"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    in_ch: usize,
    out_ch: usize,
    downsample: bool,
    stride: usize,
    norm1: Option<GroupNorm>,
    conv1: Conv1d,
    norm2: GroupNorm,
    conv2: Conv1d,
}

struct BlockCache {
    x: Array2<f64>,
    n1: Option<GroupNormCache>,
    a1: Array2<f64>,
    n2: GroupNormCache,
    a2: Array2<f64>,
    pool_idx: Option<Vec<usize>>,
}

/// Max pool with kernel = stride and ceil output length. Returns the flat
/// argmax index (into `x`) for every output cell.
fn max_pool(x: ArrayView2<f64>, k: usize) -> (Array2<f64>, Vec<usize>) {
    let (c, t) = x.dim();
    let out_len = t.div_ceil(k);
    let mut y = Array2::zeros((c, out_len));
    let mut idx = Vec::with_capacity(c * out_len);
    for ch in 0..c {
        for o in 0..out_len {
            let (mut best, mut bi) = (f64::NEG_INFINITY, o * k);
            for j in o * k..((o + 1) * k).min(t) {
                if x[[ch, j]] > best {
                    best = x[[ch, j]];
                    bi = j;
                }
            }
            y[[ch, o]] = best;
            idx.push(ch * t + bi);
        }
    }
    (y, idx)
}

impl ResBlock {
    fn forward_impl(&self, p: &[f64], x: Array2<f64>, keep: bool) -> (Array2<f64>, Option<BlockCache>) {
        let (a1, n1) = match &self.norm1 {
            Some(n) => {
                let (mut a, c) = n.forward(p, x.view());
                relu_inplace(a.view_mut());
                (a, Some(c))
            }
            None => (x.clone(), None),
        };
        let h1 = self.conv1.forward(p, a1.view());
        let (mut a2, n2) = self.norm2.forward(p, h1.view());
        relu_inplace(a2.view_mut());
        let mut out = self.conv2.forward(p, a2.view());
        let (identity, pool_idx) = if self.downsample {
            let (y, idx) = max_pool(x.view(), self.stride);
            (y, Some(idx))
        } else {
            (x.clone(), None)
        };
        let lo = (self.out_ch - self.in_ch) / 2;
        {
            let mut dst = out.slice_mut(s![lo..lo + self.in_ch, ..]);
            dst += &identity;
        }
        let cache = keep.then(|| BlockCache { x, n1, a1, n2, a2, pool_idx });
        (out, cache)
    }

    fn backward(&self, p: &[f64], g: &mut [f64], c: &BlockCache, dy: Array2<f64>) -> Array2<f64> {
        let lo = (self.out_ch - self.in_ch) / 2;
        let d_id = dy.slice(s![lo..lo + self.in_ch, ..]);
        let mut dx = match &c.pool_idx {
            Some(idx) => {
                let mut dx = Array2::<f64>::zeros(c.x.raw_dim());
                let flat = dx.as_slice_mut().expect("standard layout");
                for (k, v) in d_id.iter().enumerate() {
                    flat[idx[k]] += v;
                }
                dx
            }
            None => d_id.to_owned(),
        };
        let mut da2 = self.conv2.backward(p, g, c.a2.view(), dy.view());
        relu_backward_inplace(c.a2.view(), da2.view_mut());
        let dh1 = self.norm2.backward(p, g, &c.n2, da2.view());
        let mut da1 = self.conv1.backward(p, g, c.a1.view(), dh1.view());
        match (&self.norm1, &c.n1) {
            (Some(n), Some(nc)) => {
                relu_backward_inplace(c.a1.view(), da1.view_mut());
                dx += &n.backward(p, g, nc, da1.view());
            }
            _ => dx += &da1,
        }
        dx
    }
}

/// One pooled embedding with the id of its source window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source_window_id: String,
}

pub struct EncoderCache {
    x0: Array2<f64>,
    inv_in: Vec<f64>,
    xn: Array2<f64>,
    stem_n: GroupNormCache,
    blocks: Vec<BlockCache>,
    final_h: Array2<f64>,
    final_n: GroupNormCache,
    final_a: Array2<f64>,
    pool_idx: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub params: ParamStore,
    input_norm: InstanceNorm,
    stem: Conv1d,
    stem_norm: GroupNorm,
    blocks: Vec<ResBlock>,
    final_norm: GroupNorm,
}

impl EncoderModel {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, &[0xe7c0]);
        let mut params = ParamStore::new();
        let base = cfg.base_filters;
        let ng = cfg.norm_groups;
        let stem = Conv1d::new(&mut params, "stem.conv", 1, base, cfg.kernel, 1, 1, 1, true, &mut rng);
        let stem_norm = GroupNorm::new(&mut params, "stem.norm", base, ng);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut in_ch = base;
        for i in 0..cfg.n_blocks {
            let out_ch = cfg.block_channels(i);
            let downsample = cfg.is_downsampling(i);
            let st = if downsample { cfg.stride } else { 1 };
            let name = format!("block{i}");
            let norm1 = (i > 0).then(|| GroupNorm::new(&mut params, &format!("{name}.norm1"), in_ch, ng));
            let conv1 = Conv1d::new(&mut params, &format!("{name}.conv1"), in_ch, out_ch, cfg.kernel, st, 1, 1, true, &mut rng);
            let norm2 = GroupNorm::new(&mut params, &format!("{name}.norm2"), out_ch, ng);
            let conv2 = Conv1d::new(&mut params, &format!("{name}.conv2"), out_ch, out_ch, cfg.kernel, 1, 1, 1, true, &mut rng);
            blocks.push(ResBlock { in_ch, out_ch, downsample, stride: cfg.stride, norm1, conv1, norm2, conv2 });
            in_ch = out_ch;
        }
        let final_norm = GroupNorm::new(&mut params, "final.norm", in_ch, ng);
        Ok(Self { cfg, params, input_norm: InstanceNorm::default(), stem, stem_norm, blocks, final_norm })
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.params.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.cfg.embedding_dim()
    }

    pub fn min_len(&self) -> usize {
        self.cfg.min_len()
    }

    fn check_len(&self, t: usize) -> Result<()> {
        if t < self.min_len() {
            return Err(invalid(format!("input of {t} samples is shorter than the minimum admissible length {}", self.min_len())));
        }
        Ok(())
    }

    fn run(&self, x: &[f64], keep: bool) -> (Vec<f64>, Option<EncoderCache>) {
        let p = self.params.values();
        let x0 = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("1×T");
        let (xn, inv_in) = self.input_norm.forward(x0.view());
        let stem_h = self.stem.forward(p, xn.view());
        let (mut h, stem_n) = self.stem_norm.forward(p, stem_h.view());
        relu_inplace(h.view_mut());
        let mut caches = Vec::new();
        for b in &self.blocks {
            let (out, c) = b.forward_impl(p, h, keep);
            if let Some(c) = c {
                caches.push(c);
            }
            h = out;
        }
        let (mut a, final_n) = self.final_norm.forward(p, h.view());
        relu_inplace(a.view_mut());
        let t = a.ncols();
        let mut pool_idx = Vec::new();
        let emb: Vec<f64> = match self.cfg.pool {
            Pool::Mean => a.axis_iter(Axis(0)).map(|r| r.sum() / t as f64).collect(),
            Pool::Max => a
                .axis_iter(Axis(0))
                .map(|r| {
                    let (bi, bv) = r.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
                    pool_idx.push(bi);
                    bv
                })
                .collect(),
        };
        let cache = keep.then(|| EncoderCache {
            x0,
            inv_in,
            xn,
            stem_n,
            blocks: caches,
            final_h: h,
            final_n,
            final_a: a,
            pool_idx,
        });
        (emb, cache)
    }

    pub fn embed_values(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len())?;
        Ok(self.run(x, false).0)
    }

    pub fn embed(&self, w: &PpgWindow) -> Result<Embedding> {
        w.validate()?;
        Ok(Embedding { vector: self.embed_values(&w.values)?, source_window_id: w.id() })
    }

    pub fn embed_batch(&self, ws: &[PpgWindow]) -> Result<Vec<Embedding>> {
        par_map(ws, |w| self.embed(w)).into_iter().collect()
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<(Vec<f64>, EncoderCache)> {
        self.check_len(x.len())?;
        let (e, c) = self.run(x, true);
        Ok((e, c.expect("cache requested")))
    }

    /// Accumulates d(loss)/d(params) into `g` given d(loss)/d(embedding).
    /// Returns d(loss)/d(input).
    pub fn backward(&self, g: &mut [f64], cache: &EncoderCache, demb: &[f64]) -> Vec<f64> {
        let p = self.params.values();
        let a = &cache.final_a;
        let t = a.ncols();
        let mut da = Array2::<f64>::zeros(a.raw_dim());
        match self.cfg.pool {
            Pool::Mean => {
                for (mut row, &d) in da.axis_iter_mut(Axis(0)).zip(demb) {
                    row.fill(d / t as f64);
                }
            }
            Pool::Max => {
                for (c, (&i, &d)) in cache.pool_idx.iter().zip(demb).enumerate() {
                    da[[c, i]] = d;
                }
            }
        }
        relu_backward_inplace(a.view(), da.view_mut());
        let mut dh = self.final_norm.backward(p, g, &cache.final_n, da.view());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            dh = b.backward(p, g, c, dh);
        }
        // stem: relu(norm(conv(xn)))
        let stem_a = if let Some(c0) = cache.blocks.first() { c0.x.clone() } else { cache.final_h.clone() };
        relu_backward_inplace(stem_a.view(), dh.view_mut());
        let dstem = self.stem_norm.backward(p, g, &cache.stem_n, dh.view());
        let dxn = self.stem.backward(p, g, cache.xn.view(), dstem.view());
        let dx0 = self.input_norm.backward(cache.xn.view(), &cache.inv_in, dxn.view());
        debug_assert_eq!(dx0.ncols(), cache.x0.ncols());
        dx0.into_raw_vec_and_offset().0
    }

    /// Parameter gradient of `demb · embedding(x)`.
    pub fn embedding_grad(&self, x: &[f64], demb: &[f64], g: &mut [f64]) -> Result<()> {
        let (_, cache) = self.forward_cached(x)?;
        self.backward(g, &cache, demb);
        Ok(())
    }

    /// Summed parameter gradient of `Σ demb_i · embedding(x_i)`, recomputing
    /// activations per sample. Samples are processed a few at a time and
    /// accumulated in input order, so the result does not depend on the
    /// worker count.
    pub fn batch_param_grad(&self, items: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4;
        let mut total = self.params.zeros();
        for chunk in items.chunks(CHUNK) {
            let grads = par_map(chunk, |(x, d)| -> Result<Vec<f64>> {
                let mut g = self.params.zeros();
                self.embedding_grad(x, d, &mut g)?;
                Ok(g)
            });
            for g in grads {
                crate::util::add_assign(&mut total, &g?);
            }
        }
        Ok(total)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": "encoder", "config": self.cfg }));
        ck.push_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.header.get("kind").and_then(|k| k.as_str()) != Some("encoder") {
            return Err(Error::Format("checkpoint does not hold an encoder".into()));
        }
        let cfg: EncoderConfig = serde_json::from_value(ck.header["config"].clone()).map_err(|e| Error::Format(e.to_string()))?;
        let mut m = Self::new(cfg, 0)?;
        ck.load_store("", &mut m.params)?;
        Ok(m)
    }
}

/// Closed-form parameter count of a configuration (conv weights and biases
/// plus two affine scalars per normalised channel).
pub fn expected_param_count(cfg: &EncoderConfig) -> usize {
    let conv = |i: usize, o: usize| i * o * cfg.kernel + o;
    let norm = |c: usize| 2 * c;
    let base = cfg.base_filters;
    let mut n = conv(1, base) + norm(base);
    let mut in_ch = base;
    for i in 0..cfg.n_blocks {
        let out = cfg.block_channels(i);
        if i > 0 {
            n += norm(in_ch);
        }
        n += conv(in_ch, out) + norm(out) + conv(out, out);
        in_ch = out;
    }
    n + norm(in_ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> EncoderConfig {
        EncoderConfig { base_filters: 8, kernel: 5, n_blocks: 2, increase_every: 1, downsample_every: 1, ..Default::default() }
    }

    #[test]
    fn channel_schedule_and_dim() {
        let cfg = EncoderConfig::default();
        let chans: Vec<usize> = (0..12).map(|i| cfg.block_channels(i)).collect();
        assert_eq!(chans, [128, 128, 128, 128, 256, 256, 256, 256, 512, 512, 512, 512]);
        assert_eq!(cfg.embedding_dim(), 512);
        assert_eq!(cfg.min_len(), 64);
    }

    #[test]
    fn toy_param_count_matches_closed_form() {
        let m = EncoderModel::new(toy(), 0).unwrap();
        // stem 1*8*5+8 + 16 ; block0: 8*8*5+8 + 16 + 8*8*5+8 ;
        // block1: norm1 16 + 8*16*5+16 + 32 + 16*16*5+16 ; final 32
        let hand = (40 + 8 + 16) + (328 + 16 + 328) + (16 + 656 + 32 + 1296) + 32;
        assert_eq!(m.count_params(), hand);
        assert_eq!(m.count_params(), expected_param_count(&toy()));
    }

    #[test]
    fn short_input_error_names_minimum() {
        let m = EncoderModel::new(toy(), 0).unwrap();
        match m.embed_values(&[0.0; 3]) {
            Err(Error::InvalidArgument(msg)) => assert!(msg.contains('4'), "{msg}"),
            other => panic!("expected invalid argument, got {other:?}"),
        }
    }

    #[test]
    fn max_pool_ceil_length() {
        let x = Array2::from_shape_vec((1, 5), vec![1.0, 3.0, 2.0, 0.0, 7.0]).unwrap();
        let (y, idx) = max_pool(x.view(), 2);
        assert_eq!(y.row(0).to_vec(), vec![3.0, 2.0, 7.0]);
        assert_eq!(idx, vec![1, 2, 4]);
    }

    #[test]
    fn checkpoint_roundtrip_embeds_identically() {
        let mut m = EncoderModel::new(toy(), 4).unwrap();
        m.params.round_to_f32();
        let back = EncoderModel::from_checkpoint(&m.to_checkpoint()).unwrap();
        let x: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(m.embed_values(&x).unwrap(), back.embed_values(&x).unwrap());
    }
}
