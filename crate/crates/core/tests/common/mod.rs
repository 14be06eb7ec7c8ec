//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rustfft::{num_complex::Complex, FftPlanner};

/// Frequency (Hz) of the largest non-DC bin of the magnitude spectrum.
pub fn fft_peak_hz(x: &[f64], rate_hz: f64) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).expect("non-trivial length");
    k as f64 * rate_hz / n as f64
}

/// Largest relative discrepancy between an analytic gradient and central
/// differences of `f`, over every coordinate of `x0`. Coordinates where both
/// are below `floor` in magnitude are compared on the absolute scale `floor`.
pub fn max_rel_error(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], analytic: &[f64], h: f64, floor: f64) -> (f64, usize) {
    assert_eq!(x0.len(), analytic.len());
    let mut x = x0.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(floor);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}

use ndarray::Array2;
use ppg_relcon::distance::{DilatedStack, DistanceModel, Role};
use ppg_relcon::nn::ParamStore;
use ppg_relcon::signal::PpgWindow;
use rand::SeedableRng;

/// Dense kernel-regression reconstruction of `anchor` from `cand`, computed
/// position by position from the full-resolution role features and the
/// projection weights read out of the parameter store. Returns the
/// reconstruction at every sample and the mean squared error.
pub fn dense_reconstruction(model: &DistanceModel, anchor: &PpgWindow, cand: &PpgWindow) -> (Vec<f64>, f64) {
    let fq = model.features(anchor, Role::Query).unwrap().values;
    let fk = model.features(cand, Role::Key).unwrap().values;
    let fv = model.features(cand, Role::Value).unwrap().values;
    let get = |name: &str| model.params.get(name).unwrap().to_vec();
    let c = model.cfg.filters;
    let project = |w: &[f64], b: &[f64], f: &Array2<f64>, out: usize, t: usize| -> Vec<f64> {
        (0..out).map(|o| b[o] + (0..c).map(|i| w[o * c + i] * f[[i, t]]).sum::<f64>()).collect()
    };
    let (wq, bq, wk, bk, wv, bv) =
        (get("proj_q.weight"), get("proj_q.bias"), get("proj_k.weight"), get("proj_k.bias"), get("value_out.weight"), get("value_out.bias"));
    let keys: Vec<Vec<f64>> = (0..cand.len()).map(|j| project(&wk, &bk, &fk, c, j)).collect();
    let values: Vec<f64> = (0..cand.len()).map(|j| project(&wv, &bv, &fv, 1, j)[0]).collect();
    let scale = 1.0 / (c as f64).sqrt();
    let mut recon = Vec::with_capacity(anchor.len());
    for i in 0..anchor.len() {
        let q = project(&wq, &bq, &fq, c, i);
        let logits: Vec<f64> = keys.iter().map(|k| scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = weights.iter().sum();
        recon.push(weights.iter().zip(&values).map(|(w, v)| w * v).sum::<f64>() / z);
    }
    let mse = recon.iter().zip(&anchor.values).map(|(r, x)| (r - x).powi(2)).sum::<f64>() / anchor.len() as f64;
    (recon, mse)
}

/// Width of the input region that can change one output of a norm-free
/// dilated stack, found by perturbing a single input sample. All weights are
/// made positive and the input kept positive so no ReLU ever clips, which
/// makes every tap of every layer visible. Also returns whether any output
/// outside the formula's window moved under random signed weights.
pub fn measured_receptive_field(kernel: usize, blocks: usize) -> (usize, bool) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let stack = DilatedStack::new(&mut store, "rf", 4, kernel, blocks, 2, false, &mut rng);
    let rf = stack.receptive_field();
    let t = 2 * rf + 101;
    let centre = t / 2;
    let base = Array2::from_shape_fn((4, t), |(c, i)| 1.0 + 0.1 * ((c * 31 + i * 7) as f64 * 0.13).sin());
    let mut bumped = base.clone();
    bumped.column_mut(centre).mapv_inplace(|v| v + 1.0);

    let changed = |p: &[f64]| -> Vec<usize> {
        let y0 = stack.forward(p, base.clone());
        let y1 = stack.forward(p, bumped.clone());
        (0..t).filter(|&i| (0..4).any(|c| y0[[c, i]] != y1[[c, i]])).collect()
    };
    let signed = changed(store.values());
    let leaked = signed.iter().any(|&i| i.abs_diff(centre) > rf / 2);

    let positive: Vec<f64> = store.values().iter().map(|v| 0.01 + v.abs()).collect();
    let moved = changed(&positive);
    let extent = moved.last().unwrap() - moved.first().unwrap() + 1;
    (extent, leaked)
}
