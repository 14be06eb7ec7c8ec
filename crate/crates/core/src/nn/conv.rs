use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{fan_in_uniform, ParamRef, ParamStore};

/// Grouped, dilated, strided 1-D convolution over a `channels × time` map
/// with "same" padding: the output has `ceil(T / stride)` positions.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub weight: ParamRef,
    pub bias: Option<ParamRef>,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(groups > 0 && in_ch % groups == 0 && out_ch % groups == 0, "channels must divide groups");
        assert!(kernel > 0 && stride > 0 && dilation > 0);
        let fan_in = in_ch / groups * kernel;
        let weight = store.add(format!("{name}.weight"), &[out_ch, in_ch / groups, kernel], fan_in_uniform(rng, fan_in));
        let bias = bias.then(|| store.add(format!("{name}.bias"), &[out_ch], fan_in_uniform(rng, fan_in)));
        Self { in_ch, out_ch, kernel, stride, dilation, groups, weight, bias }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len + self.bias.map_or(0, |b| b.len)
    }

    pub fn out_len(&self, t: usize) -> usize {
        t.div_ceil(self.stride)
    }

    /// Span of input samples seen by one output position.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn pad_left(&self, t: usize) -> usize {
        let total = ((self.out_len(t) - 1) * self.stride + self.span()).saturating_sub(t);
        total / 2
    }

    fn in_per_group(&self) -> usize {
        self.in_ch / self.groups
    }

    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }

    fn w<'a>(&self, p: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.out_ch, self.in_per_group() * self.kernel), self.weight.of(p)).expect("weight shape")
    }

    /// Range of output positions `o` for which `o*stride + shift` lands inside `[0, t)`.
    fn valid_outputs(&self, shift: isize, t: usize, out_len: usize) -> std::ops::Range<usize> {
        let st = self.stride as isize;
        let lo = if shift >= 0 { 0 } else { ((-shift) + st - 1) / st };
        let hi = (t as isize - 1 - shift).div_euclid(st) + 1;
        let lo = lo.max(0) as usize;
        let hi = hi.clamp(0, out_len as isize) as usize;
        lo..hi.max(lo)
    }

    fn im2col(&self, x: ArrayView2<f64>, group: usize) -> Array2<f64> {
        let t = x.ncols();
        let out_len = self.out_len(t);
        let pad = self.pad_left(t) as isize;
        let ipg = self.in_per_group();
        let mut cols = Array2::zeros((ipg * self.kernel, out_len));
        for ci in 0..ipg {
            let xr = x.row(group * ipg + ci);
            for k in 0..self.kernel {
                let shift = (k * self.dilation) as isize - pad;
                let mut row = cols.row_mut(ci * self.kernel + k);
                for o in self.valid_outputs(shift, t, out_len) {
                    row[o] = xr[((o * self.stride) as isize + shift) as usize];
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: ArrayView2<f64>, mut dx: ArrayViewMut2<f64>, group: usize) {
        let t = dx.ncols();
        let out_len = self.out_len(t);
        let pad = self.pad_left(t) as isize;
        let ipg = self.in_per_group();
        for ci in 0..ipg {
            let mut xr = dx.row_mut(group * ipg + ci);
            for k in 0..self.kernel {
                let shift = (k * self.dilation) as isize - pad;
                let row = dcols.row(ci * self.kernel + k);
                for o in self.valid_outputs(shift, t, out_len) {
                    let idx = (o * self.stride) as isize + shift;
                    xr[idx as usize] += row[o];
                }
            }
        }
    }

    /// Stride-1 layers with few inputs per group skip im2col: each tap is an
    /// axpy over contiguous rows, which beats packing tiny matrices for GEMM.
    fn direct(&self) -> bool {
        self.stride == 1 && self.in_per_group() <= 16
    }

    /// Valid output range and input offset for every tap, stride 1 only.
    fn taps(&self, t: usize) -> Vec<(std::ops::Range<usize>, usize)> {
        let pad = self.pad_left(t) as isize;
        (0..self.kernel)
            .map(|k| {
                let shift = (k * self.dilation) as isize - pad;
                let r = self.valid_outputs(shift, t, t);
                if r.is_empty() {
                    return (0..0, 0);
                }
                let start = (r.start as isize + shift) as usize;
                (r, start)
            })
            .collect()
    }

    fn forward_direct(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let t = x.ncols();
        let (ipg, opg) = (self.in_per_group(), self.out_per_group());
        let taps = self.taps(t);
        let rows = contiguous_rows(x);
        let w = self.weight.of(p);
        let row_w = ipg * self.kernel;
        let mut y = Array2::zeros((self.out_ch, t));
        let bias = self.bias.map(|b| b.of(p));
        for (oc, mut yrow) in y.axis_iter_mut(Axis(0)).enumerate() {
            let yr = yrow.as_slice_mut().expect("owned row");
            let g = oc / opg;
            let wo = &w[oc * row_w..(oc + 1) * row_w];
            if let Some(b) = bias {
                yr.fill(b[oc]);
            }
            for ci in 0..ipg {
                let xr = &rows[g * ipg + ci];
                for (k, (r, start)) in taps.iter().enumerate() {
                    axpy(&mut yr[r.clone()], wo[ci * self.kernel + k], &xr[*start..*start + r.len()]);
                }
            }
        }
        y
    }

    fn backward_direct(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        let t = x.ncols();
        let (ipg, opg) = (self.in_per_group(), self.out_per_group());
        let taps = self.taps(t);
        let rows = contiguous_rows(x);
        let dys = contiguous_rows(dy);
        let w = self.weight.of(p);
        let row_w = ipg * self.kernel;
        let mut dx = vec![vec![0.0; t]; self.in_ch];
        {
            let gw = self.weight.of_mut(g);
            for oc in 0..self.out_ch {
                let grp = oc / opg;
                let dyr = &dys[oc];
                for ci in 0..ipg {
                    let ic = grp * ipg + ci;
                    for (k, (r, start)) in taps.iter().enumerate() {
                        let j = oc * row_w + ci * self.kernel + k;
                        let xs = *start..*start + r.len();
                        gw[j] += dot(&dyr[r.clone()], &rows[ic][xs.clone()]);
                        axpy(&mut dx[ic][xs], w[j], &dyr[r.clone()]);
                    }
                }
            }
        }
        if let Some(b) = self.bias {
            for (gb, row) in b.of_mut(g).iter_mut().zip(&dys) {
                *gb += row.iter().sum::<f64>();
            }
        }
        Array2::from_shape_vec((self.in_ch, t), dx.concat()).expect("dx shape")
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(x.nrows(), self.in_ch);
        if self.direct() {
            self.forward_direct(p, x)
        } else {
            self.forward_gemm(p, x)
        }
    }

    /// Accumulates parameter gradients into `g` and returns the input gradient.
    pub fn backward(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        if self.direct() {
            self.backward_direct(p, g, x, dy)
        } else {
            self.backward_gemm(p, g, x, dy)
        }
    }

    fn forward_gemm(&self, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let out_len = self.out_len(x.ncols());
        let opg = self.out_per_group();
        let w = self.w(p);
        let mut y = Array2::zeros((self.out_ch, out_len));
        for g in 0..self.groups {
            let cols = self.im2col(x, g);
            let rows = g * opg..(g + 1) * opg;
            general_mat_mul(1.0, &w.slice(s![rows.clone(), ..]), &cols, 0.0, &mut y.slice_mut(s![rows, ..]));
        }
        if let Some(b) = self.bias {
            for (mut row, &bi) in y.axis_iter_mut(Axis(0)).zip(b.of(p)) {
                row += bi;
            }
        }
        y
    }

    fn backward_gemm(&self, p: &[f64], g: &mut [f64], x: ArrayView2<f64>, dy: ArrayView2<f64>) -> Array2<f64> {
        let opg = self.out_per_group();
        let ipg_k = self.in_per_group() * self.kernel;
        let w = self.w(p);
        let mut dx = Array2::zeros(x.raw_dim());
        for grp in 0..self.groups {
            let cols = self.im2col(x, grp);
            let rows = grp * opg..(grp + 1) * opg;
            let dy_g = dy.slice(s![rows.clone(), ..]);
            {
                let mut gw = ArrayViewMut2::from_shape((self.out_ch, ipg_k), self.weight.of_mut(g)).expect("grad shape");
                general_mat_mul(1.0, &dy_g, &cols.t(), 1.0, &mut gw.slice_mut(s![rows.clone(), ..]));
            }
            let mut dcols = Array2::zeros(cols.raw_dim());
            general_mat_mul(1.0, &w.slice(s![rows, ..]).t(), &dy_g, 0.0, &mut dcols);
            self.col2im(dcols.view(), dx.view_mut(), grp);
        }
        if let Some(b) = self.bias {
            for (gb, row) in b.of_mut(g).iter_mut().zip(dy.axis_iter(Axis(0))) {
                *gb += row.sum();
            }
        }
        dx
    }
}

fn contiguous_rows<'a>(x: ArrayView2<'a, f64>) -> Vec<std::borrow::Cow<'a, [f64]>> {
    let t = x.ncols();
    match x.to_slice() {
        Some(all) if t > 0 => all.chunks(t).map(std::borrow::Cow::Borrowed).collect(),
        _ => x.axis_iter(Axis(0)).map(|r| std::borrow::Cow::Owned(r.to_vec())).collect(),
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { axpy_avx2(y, a, x) };
    }
    axpy_portable(y, a, x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: as in `axpy`.
        return unsafe { dot_avx2(a, b) };
    }
    dot_portable(a, b)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn axpy_avx2(y: &mut [f64], a: f64, x: &[f64]) {
    axpy_portable(y, a, x)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn dot_avx2(a: &[f64], b: &[f64]) -> f64 {
    dot_portable(a, b)
}

#[inline(always)]
fn axpy_portable(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline(always)]
fn dot_portable(a: &[f64], b: &[f64]) -> f64 {
    // Eight independent accumulators let the loop vectorise.
    let mut acc = [0.0; 8];
    let (ca, ra) = a.as_chunks::<8>();
    let (cb, rb) = b.as_chunks::<8>();
    for (x, y) in ca.iter().zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    acc.iter().sum::<f64>() + tail
}

/// Partial convolution: the input is multiplied by an observation mask and
/// each output is rescaled by `in_bounds_taps / observed_taps`. Outputs whose
/// window holds no observed sample are zeroed and flagged.
#[derive(Clone, Debug)]
pub struct PartialConv1d {
    pub conv: Conv1d,
    pub bias: ParamRef,
}

#[derive(Clone, Debug)]
pub struct PartialConvOutput {
    pub y: Array2<f64>,
    /// Renormalisation factor per output position (0 where flagged).
    pub ratio: Vec<f64>,
    /// `false` where the receptive field was entirely unobserved.
    pub out_mask: Vec<bool>,
}

impl PartialConv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let conv = Conv1d::new(store, name, in_ch, out_ch, kernel, stride, dilation, 1, false, rng);
        let bias = store.add(format!("{name}.bias"), &[out_ch], fan_in_uniform(rng, in_ch * kernel));
        Self { conv, bias }
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + self.bias.len
    }

    fn masked_input(x: ArrayView2<f64>, mask: &[bool]) -> Array2<f64> {
        let mut xm = x.to_owned();
        for mut row in xm.axis_iter_mut(Axis(0)) {
            for (v, &m) in row.iter_mut().zip(mask) {
                if !m {
                    *v = 0.0;
                }
            }
        }
        xm
    }

    pub fn forward(&self, p: &[f64], x: ArrayView2<f64>, mask: &[bool]) -> PartialConvOutput {
        assert_eq!(mask.len(), x.ncols(), "mask length must equal signal length");
        let xm = Self::masked_input(x, mask);
        let mut y = self.conv.forward(p, xm.view());
        let t = x.ncols();
        let c = &self.conv;
        let pad = c.pad_left(t) as isize;
        let out_len = c.out_len(t);
        let mut ratio = vec![0.0; out_len];
        let mut out_mask = vec![false; out_len];
        for o in 0..out_len {
            let (mut n_in, mut n_obs) = (0usize, 0usize);
            for k in 0..c.kernel {
                let idx = (o * c.stride) as isize + (k * c.dilation) as isize - pad;
                if idx >= 0 && (idx as usize) < t {
                    n_in += 1;
                    n_obs += mask[idx as usize] as usize;
                }
            }
            if n_obs > 0 {
                ratio[o] = n_in as f64 / n_obs as f64;
                out_mask[o] = true;
            }
        }
        let b = self.bias.of(p);
        for (ch, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
            for (o, v) in row.iter_mut().enumerate() {
                *v = if out_mask[o] { *v * ratio[o] + b[ch] } else { 0.0 };
            }
        }
        PartialConvOutput { y, ratio, out_mask }
    }

    pub fn backward(
        &self,
        p: &[f64],
        g: &mut [f64],
        x: ArrayView2<f64>,
        mask: &[bool],
        out: &PartialConvOutput,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut draw = dy.to_owned();
        let gb = self.bias.of_mut(g);
        for (ch, mut row) in draw.axis_iter_mut(Axis(0)).enumerate() {
            for (o, v) in row.iter_mut().enumerate() {
                if out.out_mask[o] {
                    gb[ch] += *v;
                }
                *v *= out.ratio[o];
            }
        }
        let xm = Self::masked_input(x, mask);
        let dxm = self.conv.backward(p, g, xm.view(), draw.view());
        Self::masked_input(dxm.view(), mask)
    }
}
