use ndarray::{Array2, ArrayView2, Axis};

use super::{ParamRef, ParamStore};

pub const NORM_EPS: f64 = 1e-5;

/// Standardises `xs` in place (population variance) and returns `1/sqrt(var+eps)`.
fn standardize(xs: &mut [f64], eps: f64) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for v in xs.iter_mut() {
        *v = (*v - mean) * inv;
    }
    inv
}

/// Gradient through standardisation given the normalised values `yhat`.
fn standardize_backward(yhat: &[f64], inv_std: f64, dyhat: &mut [f64]) {
    let n = yhat.len() as f64;
    let mean_dy = dyhat.iter().sum::<f64>() / n;
    let mean_dyy = dyhat.iter().zip(yhat).map(|(d, y)| d * y).sum::<f64>() / n;
    for (d, y) in dyhat.iter_mut().zip(yhat) {
        *d = inv_std * (*d - mean_dy - y * mean_dyy);
    }
}

/// Per-channel normalisation over time without affine parameters.
#[derive(Clone, Copy, Debug)]
pub struct InstanceNorm {
    pub eps: f64,
}

impl Default for InstanceNorm {
    fn default() -> Self {
        Self { eps: NORM_EPS }
    }
}

impl InstanceNorm {
    /// Returns the normalised map and the per-channel inverse std.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
        let mut y = x.as_standard_layout().into_owned();
        let inv = y
            .axis_iter_mut(Axis(0))
            .map(|mut row| standardize(row.as_slice_mut().expect("contiguous row"), self.eps))
            .collect();
        (y, inv)
    }

    pub fn backward(&self, y: ArrayView2<f64>, inv_std: &[f64], dy: ArrayView2<f64>) -> Array2<f64> {
        let mut dx = dy.as_standard_layout().into_owned();
        for ((mut d, yr), &inv) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))).zip(inv_std) {
            let yr = yr.to_vec();
            standardize_backward(&yr, inv, d.as_slice_mut().expect("contiguous row"));
        }
        dx
    }
}

/// Group normalisation over `(channels/groups) × time` blocks with a
/// per-channel affine transform.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

#[derive(Clone, Debug)]
pub struct GroupNormCache {
    pub yhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0);
        let gamma = store.add(format!("{name}.weight"), &[channels], || 1.0);
        let beta = store.add(format!("{name}.bias"), &[channels], || 0.0);
        Self { channels, groups, eps: NORM_EPS, gamma, beta }
    }

    pub fn num_params(&self) -> usize {
        self.gamma.len + self.beta.len
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> (Array2<f64>, GroupNormCache) {
        let t = x.ncols();
        let cpg = self.channels / self.groups;
        let mut yhat = x.as_standard_layout().into_owned();
        let flat = yhat.as_slice_mut().expect("standard layout");
        let inv_std = flat.chunks_mut(cpg * t).map(|blk| standardize(blk, self.eps)).collect();
        let (gm, bt) = (self.gamma.of(p), self.beta.of(p));
        let mut y = yhat.clone();
        for (c, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * gm[c] + bt[c]);
        }
        (y, GroupNormCache { yhat, inv_std })
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], cache: &GroupNormCache, dy: ArrayView2<f64>) -> Array2<f64> {
        let t = dy.ncols();
        let cpg = self.channels / self.groups;
        let gm = self.gamma.of(p);
        {
            let gg = self.gamma.of_mut(g);
            for (c, (dr, yr)) in dy.axis_iter(Axis(0)).zip(cache.yhat.axis_iter(Axis(0))).enumerate() {
                gg[c] += dr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        {
            let gb = self.beta.of_mut(g);
            for (c, dr) in dy.axis_iter(Axis(0)).enumerate() {
                gb[c] += dr.sum();
            }
        }
        let mut dx = dy.as_standard_layout().into_owned();
        for (c, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
            row.mapv_inplace(|v| v * gm[c]);
        }
        let yh = cache.yhat.as_slice().expect("standard layout");
        let flat = dx.as_slice_mut().expect("standard layout");
        for ((blk, yblk), &inv) in flat.chunks_mut(cpg * t).zip(yh.chunks(cpg * t)).zip(&cache.inv_std) {
            standardize_backward(yblk, inv, blk);
        }
        dx
    }
}

/// Layer normalisation of a single feature vector with affine parameters.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub dim: usize,
    pub eps: f64,
    pub gamma: ParamRef,
    pub beta: ParamRef,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), &[dim], || 1.0);
        let beta = store.add(format!("{name}.bias"), &[dim], || 0.0);
        Self { dim, eps: NORM_EPS, gamma, beta }
    }

    /// Returns `(output, normalised input, inverse std)`.
    pub fn forward(&self, p: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let mut yhat = x.to_vec();
        let inv = standardize(&mut yhat, self.eps);
        let (gm, bt) = (self.gamma.of(p), self.beta.of(p));
        let y = yhat.iter().enumerate().map(|(i, v)| v * gm[i] + bt[i]).collect();
        (y, yhat, inv)
    }

    pub fn backward(&self, p: &[f64], g: &mut [f64], yhat: &[f64], inv: f64, dy: &[f64]) -> Vec<f64> {
        let gm = self.gamma.of(p).to_vec();
        for (i, gg) in self.gamma.of_mut(g).iter_mut().enumerate() {
            *gg += dy[i] * yhat[i];
        }
        for (i, gb) in self.beta.of_mut(g).iter_mut().enumerate() {
            *gb += dy[i];
        }
        let mut dx: Vec<f64> = dy.iter().zip(&gm).map(|(d, w)| d * w).collect();
        standardize_backward(yhat, inv, &mut dx);
        dx
    }
}
