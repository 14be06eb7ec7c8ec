//! Deterministic synthetic PPG corpora.
//!
//! A beat is a sum of decaying harmonics plus an optional dicrotic bump;
//! phase jitter, white noise, motion bursts and baseline wander are layered
//! on top. Windows of a subject are laid out in clock-hour blocks so that
//! every window has a same-hour sibling unless it is explicitly isolated.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_labels, Dataset, Splits, WindowLabel};
use crate::error::{invalid, Result};
use crate::signal::{PpgWindow, Segment, SubjectSeries};
use crate::util::rng_for;

const HR_MIN_HZ: f64 = 0.5;
const HR_MAX_HZ: f64 = 3.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub gaussian_sd: f64,
    /// Probability that a window contains one motion burst.
    pub motion_burst_prob: f64,
    pub motion_burst_amp: f64,
    pub baseline_wander_amp: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { gaussian_sd: 0.05, motion_burst_prob: 0.1, motion_burst_amp: 1.0, baseline_wander_amp: 0.1 }
    }
}

impl NoiseSpec {
    pub fn silent() -> Self {
        Self { gaussian_sd: 0.0, motion_burst_prob: 0.0, motion_burst_amp: 0.0, baseline_wander_amp: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub windows_per_subject: usize,
    pub window_s: f64,
    pub rate_hz: f64,
    /// Fundamental-frequency range of each subject class; subjects are
    /// assigned to classes round-robin.
    pub hr_classes: Vec<(f64, f64)>,
    pub harmonics: usize,
    pub harmonic_decay: f64,
    pub dicrotic_amp: f64,
    /// Std of the per-beat phase random walk, in radians.
    pub phase_jitter: f64,
    /// Phase of the fundamental at t=0; drawn uniformly when absent.
    pub start_phase: Option<f64>,
    pub noise: NoiseSpec,
    /// Gaussian-noise multiplier applied to the noisy half of the subjects.
    pub noisy_factor: f64,
    pub windows_per_hour: usize,
    /// Extra windows per subject placed alone in their own clock hour.
    pub isolated_per_subject: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_subjects: 10,
            windows_per_subject: 20,
            window_s: 20.0,
            rate_hz: 50.0,
            hr_classes: vec![(0.9, 1.1), (1.9, 2.1)],
            harmonics: 3,
            harmonic_decay: 0.5,
            dicrotic_amp: 0.25,
            phase_jitter: 0.05,
            start_phase: None,
            noise: NoiseSpec::default(),
            noisy_factor: 4.0,
            windows_per_hour: 4,
            isolated_per_subject: 0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.rate_hz > 0.0) {
            return Err(invalid("window_s and rate_hz must be positive"));
        }
        if self.hr_classes.is_empty() {
            return Err(invalid("at least one hr class is required"));
        }
        for &(lo, hi) in &self.hr_classes {
            if !(lo > HR_MIN_HZ && hi < HR_MAX_HZ && lo <= hi) {
                return Err(invalid(format!("hr range ({lo}, {hi}) must lie within ({HR_MIN_HZ}, {HR_MAX_HZ}) Hz")));
            }
        }
        let n = &self.noise;
        if !(0.0..=1.0).contains(&n.motion_burst_prob) {
            return Err(invalid("motion_burst_prob must lie in [0, 1]"));
        }
        if [n.gaussian_sd, n.motion_burst_amp, n.baseline_wander_amp, self.phase_jitter, self.dicrotic_amp]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(invalid("noise amplitudes must be finite and non-negative"));
        }
        if self.harmonics == 0 {
            return Err(invalid("at least one harmonic is required"));
        }
        if !(self.noisy_factor >= 0.0) {
            return Err(invalid("noisy_factor must be non-negative"));
        }
        if self.windows_per_hour < 2 || self.windows_per_hour as f64 * self.window_s > 3600.0 {
            return Err(invalid("windows_per_hour must be >= 2 and fit within one hour"));
        }
        if self.windows_per_subject < 2 {
            return Err(invalid("windows_per_subject must be >= 2"));
        }
        Ok(())
    }

    pub fn samples_per_window(&self) -> usize {
        (self.window_s * self.rate_hz).round() as usize
    }

    pub fn hr_class_of(&self, subject: usize) -> usize {
        subject % self.hr_classes.len()
    }

    /// Noise class, assigned in pairs so it is balanced within each hr class.
    pub fn noise_class_of(&self, subject: usize) -> usize {
        (subject / self.hr_classes.len()) % 2
    }
}

/// What happened while generating one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenInfo {
    pub hr_hz: f64,
    pub motion_burst: bool,
}

fn check_hr(hr_hz: f64) -> Result<()> {
    if !(hr_hz > HR_MIN_HZ && hr_hz < HR_MAX_HZ) {
        return Err(invalid(format!("hr {hr_hz} Hz outside ({HR_MIN_HZ}, {HR_MAX_HZ})")));
    }
    Ok(())
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gen_values<R: Rng>(hr_hz: f64, spec: &SynthSpec, noise_sd: f64, rng: &mut R) -> (Vec<f64>, bool) {
    let n = spec.samples_per_window();
    let dt = 1.0 / spec.rate_hz;
    let phi0 = match spec.start_phase {
        Some(p) => p,
        None => rng.random_range(0.0..2.0 * PI),
    };

    // Phase random walk, one step per beat, linearly interpolated.
    let beats = (n as f64 * dt * hr_hz).ceil() as usize + 2;
    let mut walk = vec![0.0; beats + 1];
    if spec.phase_jitter > 0.0 {
        for b in 1..=beats {
            walk[b] = walk[b - 1] + spec.phase_jitter * normal(rng);
        }
    }

    let mut x = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let beat_pos = t * hr_hz;
        let b = beat_pos.floor() as usize;
        let frac = beat_pos - b as f64;
        let jitter = walk[b] * (1.0 - frac) + walk[b + 1] * frac;
        let theta = 2.0 * PI * hr_hz * t + phi0 + jitter;
        let mut v = 0.0;
        let mut amp = 1.0;
        for k in 1..=spec.harmonics {
            v += amp * (k as f64 * theta + (k - 1) as f64 * 0.6).sin();
            amp *= spec.harmonic_decay;
        }
        if spec.dicrotic_amp > 0.0 {
            let u = (theta / (2.0 * PI)).rem_euclid(1.0);
            v += spec.dicrotic_amp * (-((u - 0.55) / 0.05).powi(2) / 2.0).exp();
        }
        x.push(v);
    }

    let ns = &spec.noise;
    if ns.baseline_wander_amp > 0.0 {
        let f = rng.random_range(0.05..0.2);
        let psi = rng.random_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += ns.baseline_wander_amp * (2.0 * PI * f * i as f64 * dt + psi).sin();
        }
    }
    let burst = ns.motion_burst_prob > 0.0 && rng.random_bool(ns.motion_burst_prob);
    if burst {
        let len = ((rng.random_range(1.0..3.0) * spec.rate_hz) as usize).clamp(1, n);
        let start = rng.random_range(0..=n - len);
        for j in 0..len {
            let hann = 0.5 - 0.5 * (2.0 * PI * (j as f64 + 0.5) / len as f64).cos();
            x[start + j] += ns.motion_burst_amp * hann * normal(rng);
        }
    }
    if noise_sd > 0.0 {
        for v in x.iter_mut() {
            *v += noise_sd * normal(rng);
        }
    }
    // On-disk samples are f32; keep generated corpora bit-identical to reloads.
    for v in x.iter_mut() {
        *v = *v as f32 as f64;
    }
    (x, burst)
}

/// One synthetic window with fundamental `hr_hz`, deterministic in `seed`.
pub fn gen_window(hr_hz: f64, spec: &SynthSpec, seed: u64) -> Result<PpgWindow> {
    Ok(gen_window_info(hr_hz, spec, seed)?.0)
}

pub fn gen_window_info(hr_hz: f64, spec: &SynthSpec, seed: u64) -> Result<(PpgWindow, GenInfo)> {
    spec.validate()?;
    check_hr(hr_hz)?;
    let mut rng = rng_for(seed, &[0x5757]);
    let (values, motion_burst) = gen_values(hr_hz, spec, spec.noise.gaussian_sd, &mut rng);
    Ok((PpgWindow::new(values, spec.rate_hz, "synth", 0.0)?, GenInfo { hr_hz, motion_burst }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMeta {
    pub subject_id: String,
    pub hr_class: usize,
    pub noise_class: usize,
    /// Fundamental used for each window, aligned with `SynthCorpus::windows_of`.
    pub window_hr_hz: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub subjects: Vec<SubjectSeries>,
    pub meta: Vec<SubjectMeta>,
    /// Ids of windows deliberately placed without a same-hour sibling.
    pub isolated: Vec<String>,
}

impl SynthCorpus {
    /// Windows of subject `i` in timestamp order.
    pub fn windows_of(&self, i: usize) -> Vec<PpgWindow> {
        let s = &self.subjects[i];
        s.segments
            .iter()
            .map(|seg| {
                PpgWindow::new(seg.values.clone(), seg.rate_hz, s.subject_id.clone(), seg.start_time_s)
                    .expect("generated windows are finite")
            })
            .collect()
    }

    pub fn windows(&self) -> Vec<PpgWindow> {
        (0..self.subjects.len()).flat_map(|i| self.windows_of(i)).collect()
    }

    pub fn subject_index(&self, id: &str) -> Option<usize> {
        self.meta.iter().position(|m| m.subject_id == id)
    }
}

pub fn subject_id(i: usize) -> String {
    format!("subj{i:03}")
}

/// Generates the corpus described by `spec`.
pub fn gen_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    let mut meta = Vec::with_capacity(spec.n_subjects);
    let mut isolated = Vec::new();
    for i in 0..spec.n_subjects {
        let id = subject_id(i);
        let hr_class = spec.hr_class_of(i);
        let noise_class = spec.noise_class_of(i);
        let (lo, hi) = spec.hr_classes[hr_class];
        let noise_sd = spec.noise.gaussian_sd * if noise_class == 1 { spec.noisy_factor } else { 1.0 };
        let mut rng = rng_for(spec.seed, &[0x5359, i as u64]);

        let starts = hour_block_starts(spec, &mut isolated, &id);
        let mut segments = Vec::with_capacity(starts.len());
        let mut hrs = Vec::with_capacity(starts.len());
        for start in starts {
            let hr = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let mut wrng = rng_for(spec.seed, &[0x5357, i as u64, segments.len() as u64]);
            let (values, _) = gen_values(hr, spec, noise_sd, &mut wrng);
            segments.push(Segment { start_time_s: start, rate_hz: spec.rate_hz, values });
            hrs.push(hr);
        }
        subjects.push(SubjectSeries { subject_id: id.clone(), segments });
        meta.push(SubjectMeta { subject_id: id, hr_class, noise_class, window_hr_hz: hrs });
    }
    Ok(SynthCorpus { spec: spec.clone(), subjects, meta, isolated })
}

/// Start times: blocks of `windows_per_hour` contiguous windows per clock
/// hour (a trailing singleton joins the previous block), then isolated
/// windows one per hour.
fn hour_block_starts(spec: &SynthSpec, isolated: &mut Vec<String>, id: &str) -> Vec<f64> {
    let n = spec.windows_per_subject;
    let per = spec.windows_per_hour;
    let mut sizes = vec![per; n / per];
    match n % per {
        0 => {}
        1 => {
            if let Some(last) = sizes.last_mut() {
                if (*last + 1) as f64 * spec.window_s <= 3600.0 {
                    *last += 1;
                } else {
                    *last -= 1;
                    sizes.push(2);
                }
            }
        }
        r => sizes.push(r),
    }
    let mut starts = Vec::with_capacity(n + spec.isolated_per_subject);
    let mut hour = 0;
    for size in sizes {
        for k in 0..size {
            starts.push(hour as f64 * 3600.0 + k as f64 * spec.window_s);
        }
        hour += 1;
    }
    for _ in 0..spec.isolated_per_subject {
        let t = hour as f64 * 3600.0;
        isolated.push(format!("{id}@{}", (t * 1000.0).round() as i64));
        starts.push(t);
        hour += 1;
    }
    starts
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    HrRegression,
    #[default]
    ClassByHr,
    ClassByNoise,
}

impl Task {
    pub fn is_regression(self) -> bool {
        matches!(self, Task::HrRegression)
    }
}

/// A labelled corpus with subject-wise splits.
#[derive(Clone, Debug)]
pub struct TaskDataset {
    pub task: Task,
    pub corpus: SynthCorpus,
    pub labels: Vec<WindowLabel>,
    pub splits: Splits,
}

impl TaskDataset {
    /// Windows and labels of the given subjects, in corpus order.
    pub fn split(&self, ids: &[String]) -> (Vec<PpgWindow>, Vec<WindowLabel>) {
        let mut ws = Vec::new();
        let mut ls = Vec::new();
        let by_id: std::collections::HashMap<&str, &WindowLabel> =
            self.labels.iter().map(|l| (l.window_id.as_str(), l)).collect();
        for (i, m) in self.corpus.meta.iter().enumerate() {
            if !ids.contains(&m.subject_id) {
                continue;
            }
            for w in self.corpus.windows_of(i) {
                ls.push(by_id[w.id().as_str()].clone());
                ws.push(w);
            }
        }
        (ws, ls)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        std::fs::create_dir_all(root)?;
        Dataset::save(root, &self.splits, &self.corpus.subjects)?;
        write_labels(root, &self.labels)
    }
}

/// Builds a labelled task over a fresh corpus. Splits are stratified by the
/// task's subject class: roughly 60/20/20 train/val/test per class.
pub fn gen_task(spec: &SynthSpec, task: Task) -> Result<TaskDataset> {
    let corpus = gen_corpus(spec)?;
    let class_of = |m: &SubjectMeta| match task {
        Task::ClassByNoise => m.noise_class,
        _ => m.hr_class,
    };
    let mut labels = Vec::new();
    for (i, m) in corpus.meta.iter().enumerate() {
        for (w, hr) in corpus.windows_of(i).iter().zip(&m.window_hr_hz) {
            labels.push(WindowLabel { window_id: w.id(), class: class_of(m), hr_bpm: 60.0 * hr });
        }
    }
    let n_classes = match task {
        Task::ClassByNoise => 2,
        _ => spec.hr_classes.len(),
    };
    let mut splits = Splits::default();
    for c in 0..n_classes {
        let ids: Vec<String> =
            corpus.meta.iter().filter(|m| class_of(m) == c).map(|m| m.subject_id.clone()).collect();
        let n = ids.len();
        let n_test = if n >= 3 { ((n as f64 * 0.2).round() as usize).max(1) } else { 0 };
        let n_val = if n >= 3 { ((n as f64 * 0.2).round() as usize).max(1) } else { 0 };
        let n_train = n - n_test - n_val;
        splits.train.extend_from_slice(&ids[..n_train]);
        splits.val.extend_from_slice(&ids[n_train..n_train + n_val]);
        splits.test.extend_from_slice(&ids[n_train + n_val..]);
    }
    Ok(TaskDataset { task, corpus, labels, splits })
}
