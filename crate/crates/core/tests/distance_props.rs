mod common;

use ndarray::Array2;
use ppg_relcon::distance::{train_distance, DistanceConfig, DistanceModel, DistanceTrainConfig};
use ppg_relcon::nn::{ParamStore, PartialConv1d};
use ppg_relcon::signal::PpgWindow;
use ppg_relcon::synth::{gen_window, SynthSpec};
use proptest::prelude::*;
use rand::SeedableRng;

fn small_cfg(stride: usize) -> DistanceConfig {
    DistanceConfig { kernel: 5, filters: 8, blocks: 3, groups: 2, stride, ..Default::default() }
}

#[test]
fn partial_conv_with_full_mask_is_plain_convolution() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let (k, out_ch, t) = (7, 3, 40);
    let pc = PartialConv1d::new(&mut store, "pc", 1, out_ch, k, 1, 1, &mut rng);
    let x: Vec<f64> = (0..t).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect();
    let xa = Array2::from_shape_vec((1, t), x.clone()).unwrap();
    let out = pc.forward(store.values(), xa.view(), &vec![true; t]);
    let w = store.get("pc.weight").unwrap();
    let b = store.get("pc.bias").unwrap();
    let pad = (k - 1) / 2;
    for c in 0..out_ch {
        for o in 0..t {
            let expect: f64 = b[c]
                + (0..k)
                    .filter_map(|j| (o + j).checked_sub(pad).filter(|&i| i < t).map(|i| w[c * k + j] * x[i]))
                    .sum::<f64>();
            assert!((out.y[[c, o]] - expect).abs() < 1e-6);
        }
    }
    assert!(out.out_mask.iter().all(|&m| m));
}

#[test]
fn dilated_stack_receptive_field() {
    let (extent, leaked) = common::measured_receptive_field(15, 5);
    assert_eq!(extent, 1 + 14 * (1 + 2 + 4 + 8 + 16));
    assert_eq!(extent, 435);
    assert!(!leaked);
    let (small, leaked) = common::measured_receptive_field(3, 2);
    assert_eq!(small, 1 + 2 * (1 + 2));
    assert!(!leaked);
}

#[test]
fn constant_input_with_zero_biases_gives_constant_interior() {
    let mut model = DistanceModel::new(small_cfg(1), 2).unwrap();
    let names: Vec<String> = model.params.specs().iter().map(|s| s.name.clone()).filter(|n| n.ends_with(".bias")).collect();
    let specs = model.params.specs().to_vec();
    let mut offset = 0;
    let vals = model.params.values_mut();
    for s in &specs {
        if names.contains(&s.name) {
            vals[offset..offset + s.numel()].fill(0.0);
        }
        offset += s.numel();
    }
    let t = 300;
    let w = PpgWindow::new(vec![0.7; t], 50.0, "s", 0.0).unwrap();
    let rf = model.receptive_field();
    for role in [ppg_relcon::distance::Role::Query, ppg_relcon::distance::Role::Key] {
        let f = model.features(&w, role).unwrap().values;
        for c in 0..f.nrows() {
            let interior: Vec<f64> = (rf..t - rf).map(|i| f[[c, i]]).collect();
            assert!(interior.iter().all(|v| (v - interior[0]).abs() < 1e-9), "channel {c} varies");
        }
    }
}

#[test]
fn stride_one_matches_dense_oracle() {
    let model = DistanceModel::new(small_cfg(1), 4).unwrap();
    let spec = SynthSpec { window_s: 4.0, ..Default::default() };
    for s in 0..5 {
        let a = gen_window(1.1, &spec, 2 * s).unwrap();
        let c = gen_window(1.9, &spec, 2 * s + 1).unwrap();
        let got = model.cross_attn_reconstruct(&a, &c).unwrap();
        let (recon, mse) = common::dense_reconstruction(&model, &a, &c);
        assert_eq!(got.reconstruction.len(), recon.len());
        for (g, r) in got.reconstruction.iter().zip(&recon) {
            assert!((g - r).abs() < 1e-9);
        }
        assert!((got.distance - mse).abs() < 1e-9);
    }
}

#[test]
fn training_is_reproducible() {
    let spec = SynthSpec { window_s: 2.0, ..Default::default() };
    let corpus: Vec<PpgWindow> = (0..6).map(|s| gen_window(1.0 + 0.2 * s as f64, &spec, s).unwrap()).collect();
    let cfg = DistanceTrainConfig { model: small_cfg(2), epochs: 2, batch_size: 3, mask_s: 0.4, seed: 8, ..Default::default() };
    let (m1, h1) = train_distance(&corpus, &cfg).unwrap();
    let (m2, h2) = train_distance(&corpus, &cfg).unwrap();
    assert_eq!(h1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), h2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(m1.params.values(), m2.params.values());
    assert!(m1.is_frozen());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn distances_are_finite_and_attention_is_stochastic(
        a in prop::collection::vec(-3.0f64..3.0, 40..90),
        c in prop::collection::vec(-3.0f64..3.0, 40..90),
        stride in 1usize..5,
    ) {
        let mut model = DistanceModel::new(small_cfg(stride), 6).unwrap();
        model.freeze();
        let wa = PpgWindow::new(a, 50.0, "a", 0.0).unwrap();
        let wc = PpgWindow::new(c, 50.0, "c", 0.0).unwrap();
        let r = model.cross_attn_reconstruct(&wa, &wc).unwrap();
        prop_assert!(r.distance.is_finite() && r.distance >= 0.0);
        prop_assert_eq!(r.distance, model.distance(&wa, &wc).unwrap());
        let att = r.attention.unwrap();
        for row in att.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }
}
