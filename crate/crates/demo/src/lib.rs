//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Three operations: render a synthetic PPG window, train a small motif
//! distance and inspect its cross-attention, and explore how the relative
//! contrastive loss splits a candidate set into positives and negatives.

use ppg_relcon::distance::{DistanceConfig, DistanceModel, DistanceTrainConfig, DistanceTrainer};
use ppg_relcon::relcon::{build_negatives, ntxent};
use ppg_relcon::signal::{znorm_subject, PpgWindow, StatsSource};
use ppg_relcon::synth::{gen_window, NoiseSpec, SynthSpec};
use wasm_bindgen::prelude::*;

const WINDOW_S: f64 = 4.0;

fn js(e: ppg_relcon::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn spec(window_s: f64, noise_sd: f64) -> SynthSpec {
    SynthSpec { window_s, noise: NoiseSpec { gaussian_sd: noise_sd, ..NoiseSpec::default() }, ..SynthSpec::default() }
}

fn normed_window(hr_hz: f64, seed: u64) -> Result<PpgWindow, ppg_relcon::Error> {
    let w = gen_window(hr_hz, &spec(WINDOW_S, 0.05), seed)?;
    Ok(znorm_subject(&[w], StatsSource::All)?.0.remove(0))
}

/// Samples of one synthetic window at 50 Hz.
#[wasm_bindgen]
pub fn synth_waveform(hr_hz: f64, window_s: f64, noise_sd: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    Ok(gen_window(hr_hz, &spec(window_s, noise_sd), seed).map_err(js)?.values)
}

/// A small motif distance trained in the page on a handful of windows.
#[wasm_bindgen]
pub struct DistanceDemo {
    trainer: DistanceTrainer,
    corpus: Vec<PpgWindow>,
    last: Option<(usize, usize, Vec<f64>)>,
}

#[wasm_bindgen]
impl DistanceDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<DistanceDemo, JsError> {
        let model = DistanceConfig { kernel: 5, filters: 8, blocks: 3, groups: 2, stride: 4, ..DistanceConfig::default() };
        let cfg = DistanceTrainConfig { model, epochs: 1, batch_size: 4, lr: 3e-3, mask_s: 0.6, seed };
        let corpus = (0..12)
            .map(|i| normed_window(if i % 2 == 0 { 1.0 } else { 2.0 }, seed.wrapping_mul(31).wrapping_add(i)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(js)?;
        Ok(DistanceDemo { trainer: DistanceTrainer::new(cfg).map_err(js)?, corpus, last: None })
    }

    /// Runs `epochs` passes of masked reconstruction; returns the last loss.
    pub fn train_steps(&mut self, epochs: usize) -> Result<f64, JsError> {
        let mut loss = f64::NAN;
        for _ in 0..epochs {
            loss = self.trainer.train_epoch(&self.corpus).map_err(js)?;
        }
        Ok(loss)
    }

    pub fn epochs_trained(&self) -> usize {
        self.trainer.epoch
    }

    /// Reconstructs an anchor at `anchor_hz` from a candidate at `cand_hz`.
    /// Returns the distance; the attention map is kept for [`Self::attention`].
    pub fn distance(&mut self, anchor_hz: f64, cand_hz: f64, seed: u64) -> Result<f64, JsError> {
        let a = normed_window(anchor_hz, seed).map_err(js)?;
        let c = normed_window(cand_hz, seed + 1).map_err(js)?;
        let r = self.trainer.model.cross_attn_reconstruct(&a, &c).map_err(js)?;
        self.last = r.attention.map(|att| (att.nrows(), att.ncols(), att.iter().copied().collect()));
        Ok(r.distance)
    }

    /// Row-major attention weights of the last [`Self::distance`] call.
    pub fn attention(&self) -> Vec<f64> {
        self.last.as_ref().map(|l| l.2.clone()).unwrap_or_default()
    }

    pub fn attention_rows(&self) -> usize {
        self.last.as_ref().map_or(0, |l| l.0)
    }

    pub fn attention_cols(&self) -> usize {
        self.last.as_ref().map_or(0, |l| l.1)
    }
}

/// Per-candidate NT-Xent terms when each candidate in turn is the positive
/// and its negatives are the candidates strictly farther away. Candidates
/// with no farther candidate contribute zero.
#[wasm_bindgen]
pub fn relcon_terms(similarities: &[f64], distances: &[f64], temperature: f64) -> Result<Vec<f64>, JsError> {
    if similarities.len() != distances.len() || similarities.is_empty() {
        return Err(JsError::new("need one similarity per distance"));
    }
    if !(temperature > 0.0) {
        return Err(JsError::new("temperature must be positive"));
    }
    Ok((0..distances.len())
        .map(|i| {
            let negs: Vec<f64> = build_negatives(i, distances).into_iter().map(|j| similarities[j]).collect();
            ntxent(similarities[i], &negs, temperature)
        })
        .collect())
}
