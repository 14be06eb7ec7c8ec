//! Signal containers, resampling, windowing, per-subject normalisation and
//! missingness masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// One single-channel window with its observation mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpgWindow {
    pub values: Vec<f64>,
    pub rate_hz: f64,
    pub subject_id: String,
    pub start_time_s: f64,
    /// `true` where the sample was observed.
    pub observed: Vec<bool>,
}

impl PpgWindow {
    /// Fully observed window. Non-finite samples are zeroed and marked unobserved.
    pub fn new(values: Vec<f64>, rate_hz: f64, subject_id: impl Into<String>, start_time_s: f64) -> Result<Self> {
        let mut values = values;
        let observed = values
            .iter_mut()
            .map(|v| {
                if v.is_finite() {
                    true
                } else {
                    *v = 0.0;
                    false
                }
            })
            .collect();
        let w = Self { values, rate_hz, subject_id: subject_id.into(), start_time_s, observed };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(invalid("window must hold at least one sample"));
        }
        if self.values.len() != self.observed.len() {
            return Err(invalid(format!(
                "values ({}) and observation mask ({}) differ in length",
                self.values.len(),
                self.observed.len()
            )));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(invalid(format!("rate_hz must be positive, got {}", self.rate_hz)));
        }
        if self.values.iter().zip(&self.observed).any(|(v, &o)| o && !v.is_finite()) {
            return Err(invalid("observed samples must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.rate_hz
    }

    /// Clock hour since the subject epoch.
    pub fn hour(&self) -> i64 {
        (self.start_time_s / 3600.0).floor() as i64
    }

    /// Stable identifier `subject@start_ms`.
    pub fn id(&self) -> String {
        format!("{}@{}", self.subject_id, (self.start_time_s * 1000.0).round() as i64)
    }

    /// Copy with `mask` ANDed into the observation mask; masked samples become 0.
    pub fn with_mask(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.len() {
            return Err(invalid(format!("mask length {} != window length {}", mask.len(), self.len())));
        }
        let mut w = self.clone();
        for ((v, o), &m) in w.values.iter_mut().zip(w.observed.iter_mut()).zip(mask) {
            if !m {
                *o = false;
                *v = 0.0;
            }
        }
        Ok(w)
    }
}

/// One contiguous recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_time_s: f64,
    pub rate_hz: f64,
    pub values: Vec<f64>,
}

impl Segment {
    pub fn end_time_s(&self) -> f64 {
        self.start_time_s + self.values.len() as f64 / self.rate_hz
    }
}

/// All recordings of one subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub segments: Vec<Segment>,
}

impl SubjectSeries {
    pub fn validate(&self) -> Result<()> {
        let mut segs: Vec<&Segment> = self.segments.iter().collect();
        segs.sort_by(|a, b| a.start_time_s.total_cmp(&b.start_time_s));
        for s in &segs {
            if s.values.is_empty() {
                return Err(invalid(format!("subject `{}` has an empty segment", self.subject_id)));
            }
            if !(s.rate_hz > 0.0) {
                return Err(invalid(format!("subject `{}` has a non-positive rate", self.subject_id)));
            }
        }
        for pair in segs.windows(2) {
            if pair[1].start_time_s < pair[0].end_time_s() - 1e-9 {
                return Err(invalid(format!(
                    "subject `{}` has overlapping segments at t={}",
                    self.subject_id, pair[1].start_time_s
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPlacement {
    UniformRandom,
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub duration_s: f64,
    pub placement: MaskPlacement,
    pub rng_seed: u64,
}

impl MaskSpec {
    pub fn uniform(duration_s: f64, rng_seed: u64) -> Self {
        Self { duration_s, placement: MaskPlacement::UniformRandom, rng_seed }
    }
}

/// Builds an observation mask with exactly one contiguous unobserved run of
/// `round(duration_s * rate_hz)` samples.
pub fn make_mask(t: usize, rate_hz: f64, spec: &MaskSpec) -> Result<Vec<bool>> {
    if !(rate_hz > 0.0) || !(spec.duration_s > 0.0) {
        return Err(invalid("mask duration and rate must be positive"));
    }
    let len = (spec.duration_s * rate_hz).round() as usize;
    if len == 0 || len > t {
        return Err(invalid(format!("mask run of {len} samples does not fit a window of {t}")));
    }
    let start = match spec.placement {
        MaskPlacement::UniformRandom => ChaCha8Rng::seed_from_u64(spec.rng_seed).random_range(0..=t - len),
        MaskPlacement::Fixed(s) if s + len <= t => s,
        MaskPlacement::Fixed(s) => {
            return Err(invalid(format!("fixed mask start {s} + {len} exceeds window length {t}")));
        }
    };
    let mut mask = vec![true; t];
    mask[start..start + len].iter_mut().for_each(|m| *m = false);
    Ok(mask)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    #[default]
    Linear,
    /// Hann-windowed sinc interpolation with an anti-aliasing cutoff.
    Sinc,
}

pub fn resample(x: &[f64], src_rate_hz: f64, dst_rate_hz: f64) -> Result<Vec<f64>> {
    resample_with(x, src_rate_hz, dst_rate_hz, ResampleMethod::Linear)
}

pub fn resample_with(x: &[f64], src_rate_hz: f64, dst_rate_hz: f64, method: ResampleMethod) -> Result<Vec<f64>> {
    if !(src_rate_hz > 0.0 && dst_rate_hz > 0.0) {
        return Err(invalid(format!("rates must be positive (got {src_rate_hz} -> {dst_rate_hz})")));
    }
    if x.is_empty() {
        return Err(invalid("cannot resample an empty signal"));
    }
    if src_rate_hz == dst_rate_hz {
        return Ok(x.to_vec());
    }
    let n_out = (x.len() as f64 * dst_rate_hz / src_rate_hz).round().max(1.0) as usize;
    let step = src_rate_hz / dst_rate_hz;
    let last = x.len() - 1;
    Ok(match method {
        ResampleMethod::Linear => (0..n_out)
            .map(|i| {
                let pos = (i as f64 * step).min(last as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(last);
                let frac = pos - lo as f64;
                x[lo] * (1.0 - frac) + x[hi] * frac
            })
            .collect(),
        ResampleMethod::Sinc => {
            // cutoff as a fraction of the source rate
            let fc = 0.5 * dst_rate_hz.min(src_rate_hz) / src_rate_hz;
            let half = (8.0 / fc).ceil() as isize;
            (0..n_out)
                .map(|i| {
                    let pos = i as f64 * step;
                    let centre = pos.round() as isize;
                    let (mut acc, mut wsum) = (0.0, 0.0);
                    for n in (centre - half).max(0)..=(centre + half).min(last as isize) {
                        let u = pos - n as f64;
                        let arg = 2.0 * fc * u;
                        let sinc = if arg.abs() < 1e-12 { 1.0 } else { (std::f64::consts::PI * arg).sin() / (std::f64::consts::PI * arg) };
                        let hann = 0.5 * (1.0 + (std::f64::consts::PI * u / (half as f64 + 1.0)).cos());
                        let w = 2.0 * fc * sinc * hann;
                        acc += w * x[n as usize];
                        wsum += w;
                    }
                    if wsum.abs() > 1e-12 {
                        acc / wsum
                    } else {
                        acc
                    }
                })
                .collect()
        }
    })
}

/// Cuts windows of `round(window_s * rate_hz)` samples every
/// `round(stride_s * rate_hz)` samples from each segment. Windows never span
/// two segments; segments shorter than one window yield nothing.
pub fn window_subject(series: &SubjectSeries, window_s: f64, stride_s: f64, rate_hz: f64) -> Result<Vec<PpgWindow>> {
    if !(window_s > 0.0 && stride_s > 0.0 && rate_hz > 0.0) {
        return Err(invalid("window, stride and rate must be positive"));
    }
    let t = (window_s * rate_hz).round() as usize;
    let stride = ((stride_s * rate_hz).round() as usize).max(1);
    if t == 0 {
        return Err(invalid("window shorter than one sample"));
    }
    let mut out = Vec::new();
    let mut segs: Vec<&Segment> = series.segments.iter().collect();
    segs.sort_by(|a, b| a.start_time_s.total_cmp(&b.start_time_s));
    for seg in segs {
        let values = if seg.rate_hz == rate_hz { seg.values.clone() } else { resample(&seg.values, seg.rate_hz, rate_hz)? };
        let mut start = 0;
        while start + t <= values.len() {
            let w = PpgWindow::new(
                values[start..start + t].to_vec(),
                rate_hz,
                series.subject_id.clone(),
                seg.start_time_s + start as f64 / rate_hz,
            )?;
            out.push(w);
            start += stride;
        }
    }
    Ok(out)
}

/// Per-subject location/scale used for z-normalisation (population std).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub fn apply(&self, w: &PpgWindow) -> PpgWindow {
        let mut out = w.clone();
        for (v, &o) in out.values.iter_mut().zip(&w.observed) {
            if o {
                *v = (*v - self.mean) / self.std;
            }
        }
        out
    }

    pub fn invert(&self, w: &PpgWindow) -> PpgWindow {
        let mut out = w.clone();
        for (v, &o) in out.values.iter_mut().zip(&w.observed) {
            if o {
                *v = *v * self.std + self.mean;
            }
        }
        out
    }
}

/// Which windows of a subject contribute to its normalisation statistics.
#[derive(Clone, Copy, Debug)]
pub enum StatsSource<'a> {
    /// Only windows flagged `true` (a subject's training windows).
    TrainOnly(&'a [bool]),
    All,
}

/// Pooled observed-sample mean and population std over `windows`.
pub fn subject_stats<'a>(subject_id: &str, windows: impl IntoIterator<Item = &'a PpgWindow>) -> Result<NormStats> {
    let (mut n, mut sum) = (0usize, 0.0);
    let windows: Vec<&PpgWindow> = windows.into_iter().collect();
    for w in &windows {
        for (v, &o) in w.values.iter().zip(&w.observed) {
            if o {
                n += 1;
                sum += v;
            }
        }
    }
    if n < 2 {
        return Err(invalid(format!("subject `{subject_id}` has fewer than 2 observed samples")));
    }
    let mean = sum / n as f64;
    let mut ss = 0.0;
    for w in &windows {
        for (v, &o) in w.values.iter().zip(&w.observed) {
            if o {
                ss += (v - mean) * (v - mean);
            }
        }
    }
    let std = (ss / n as f64).sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateSubject { subject_id: subject_id.to_string() });
    }
    Ok(NormStats { mean, std })
}

/// Global per-subject z-normalisation. All windows must share one subject.
pub fn znorm_subject(windows: &[PpgWindow], source: StatsSource<'_>) -> Result<(Vec<PpgWindow>, NormStats)> {
    let Some(first) = windows.first() else {
        return Err(invalid("no windows to normalise"));
    };
    let sid = &first.subject_id;
    if windows.iter().any(|w| &w.subject_id != sid) {
        return Err(invalid("znorm_subject expects windows of a single subject"));
    }
    let stats = match source {
        StatsSource::All => subject_stats(sid, windows)?,
        StatsSource::TrainOnly(flags) => {
            if flags.len() != windows.len() {
                return Err(invalid("train flags must align with windows"));
            }
            subject_stats(sid, windows.iter().zip(flags).filter(|(_, &f)| f).map(|(w, _)| w))?
        }
    };
    Ok((windows.iter().map(|w| stats.apply(w)).collect(), stats))
}
