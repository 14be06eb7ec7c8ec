mod common;

use std::collections::HashSet;
use std::f64::consts::PI;

use common::fft_peak_hz;
use ppg_relcon::signal::resample;
use ppg_relcon::synth::{gen_task, gen_window, gen_window_info, NoiseSpec, SynthSpec, Task};

fn quiet(window_s: f64) -> SynthSpec {
    SynthSpec { window_s, noise: NoiseSpec::silent(), ..Default::default() }
}

#[test]
fn noiseless_one_hertz_peaks_at_one_hertz() {
    let w = gen_window(1.0, &quiet(60.0), 7).unwrap();
    assert_eq!(w.len(), 3000);
    let bin = 50.0 / 3000.0;
    assert!((fft_peak_hz(&w.values, 50.0) - 1.0).abs() <= bin + 1e-12);
}

#[test]
fn fundamental_survives_moderate_noise() {
    let spec = SynthSpec { window_s: 60.0, noise: NoiseSpec { gaussian_sd: 0.1, ..Default::default() }, ..Default::default() };
    for (i, &hr) in [0.7, 0.95, 1.2, 1.5, 1.85, 2.1, 2.6, 3.2].iter().enumerate() {
        for seed in 0..5 {
            let w = gen_window(hr, &spec, 100 * i as u64 + seed).unwrap();
            let peak = fft_peak_hz(&w.values, 50.0);
            assert!((peak - hr).abs() <= 0.05, "hr {hr} seed {seed}: peak {peak}");
        }
    }
}

#[test]
fn motion_burst_rate_matches_probability() {
    for prob in [0.1, 0.3] {
        let spec = SynthSpec { window_s: 4.0, noise: NoiseSpec { motion_burst_prob: prob, ..Default::default() }, ..Default::default() };
        let bursts = (0..1000).filter(|&s| gen_window_info(1.3, &spec, s).unwrap().1.motion_burst).count() as f64;
        let expected = 1000.0 * prob;
        assert!((bursts - expected).abs() <= 0.2 * expected, "prob {prob}: {bursts} bursts");
    }
}

#[test]
fn resampling_keeps_the_spectral_peak() {
    let x: Vec<f64> = (0..6000).map(|i| (2.0 * PI * i as f64 / 100.0).sin()).collect();
    assert!((fft_peak_hz(&x, 100.0) - 1.0).abs() <= 100.0 / 6000.0);
    let y = resample(&x, 100.0, 50.0).unwrap();
    assert_eq!(y.len(), 3000);
    assert!((fft_peak_hz(&y, 50.0) - 1.0).abs() <= 50.0 / 3000.0);
}

#[test]
fn regression_targets_are_sixty_times_hr() {
    let spec = SynthSpec { n_subjects: 6, windows_per_subject: 4, window_s: 4.0, seed: 3, ..Default::default() };
    let task = gen_task(&spec, Task::HrRegression).unwrap();
    let mut k = 0;
    for (i, m) in task.corpus.meta.iter().enumerate() {
        for (w, hr) in task.corpus.windows_of(i).iter().zip(&m.window_hr_hz) {
            let label = &task.labels[k];
            assert_eq!(label.window_id, w.id());
            assert_eq!(label.hr_bpm, 60.0 * hr);
            k += 1;
        }
    }
    assert_eq!(k, task.labels.len());
}

#[test]
fn splits_never_share_subjects() {
    for task in [Task::ClassByHr, Task::ClassByNoise, Task::HrRegression] {
        let spec = SynthSpec { n_subjects: 17, windows_per_subject: 2, window_s: 4.0, ..Default::default() };
        let ds = gen_task(&spec, task).unwrap();
        let all: Vec<&String> = ds.splits.all().collect();
        let unique: HashSet<&String> = all.iter().copied().collect();
        assert_eq!(all.len(), unique.len());
        assert_eq!(unique.len(), 17);
    }
}

#[test]
fn hr_classes_are_separable_by_spectral_peak() {
    let spec = SynthSpec { n_subjects: 8, windows_per_subject: 6, window_s: 20.0, seed: 9, ..Default::default() };
    let ds = gen_task(&spec, Task::ClassByHr).unwrap();
    let ids: Vec<String> = ds.splits.all().cloned().collect();
    let (ws, labels) = ds.split(&ids);
    for (w, l) in ws.iter().zip(&labels) {
        let predicted = usize::from(fft_peak_hz(&w.values, w.rate_hz) > 1.5);
        assert_eq!(predicted, l.class, "window {}", w.id());
    }
}
