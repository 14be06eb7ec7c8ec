//! Analytic gradients against central finite differences.

mod common;

use common::max_rel_error;
use ppg_relcon::distance::{DistanceConfig, DistanceModel};
use ppg_relcon::encoder::{EncoderConfig, EncoderModel, Pool};
use ppg_relcon::relcon::{relcon_loss, relcon_loss_grad, LossConfig, Similarity};
use ppg_relcon::signal::{make_mask, MaskPlacement, MaskSpec, PpgWindow};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-7;
const TOL: f64 = 1e-3;

fn tiny_distance(stride: usize) -> DistanceModel {
    let cfg = DistanceConfig { kernel: 3, filters: 4, blocks: 2, groups: 2, stride, ..Default::default() };
    DistanceModel::new(cfg, 17).unwrap()
}

fn noisy_wave(t: usize, f: f64, seed: u64) -> PpgWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..t).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / 50.0).sin() + 0.3 * rng.random::<f64>()).collect();
    PpgWindow::new(values, 50.0, "s", 0.0).unwrap()
}

#[test]
fn masked_reconstruction_gradient() {
    for stride in [1, 3] {
        let model = tiny_distance(stride);
        let w = noisy_wave(60, 1.7, 1);
        let mask = make_mask(60, 50.0, &MaskSpec { duration_s: 0.3, placement: MaskPlacement::Fixed(20), rng_seed: 0 }).unwrap();
        let (_, grad) = model.masked_loss_grad(&w, &mask).unwrap();
        let mut m = model.clone();
        let f = |p: &[f64]| {
            m.params.values_mut().copy_from_slice(p);
            m.masked_loss(&w, &mask).unwrap()
        };
        let (err, at) = max_rel_error(f, model.params.values(), &grad, H, FLOOR);
        assert!(err < TOL, "stride {stride}: relative error {err} at parameter {at}");
    }
}

fn tiny_encoder(pool: Pool) -> EncoderModel {
    let cfg = EncoderConfig { base_filters: 4, kernel: 3, stride: 2, n_blocks: 2, increase_every: 1, downsample_every: 2, norm_groups: 1, pool };
    EncoderModel::new(cfg, 5).unwrap()
}

fn relcon_through_encoder(pool: Pool, similarity: Similarity) {
    let enc = tiny_encoder(pool);
    let xs: Vec<Vec<f64>> = (0..4).map(|i| noisy_wave(32, 1.0 + 0.4 * i as f64, 10 + i).values).collect();
    let distances = [0.2, 0.9, 0.5];
    let cfg = LossConfig { temperature: 0.5, similarity };
    let loss_of = |e: &EncoderModel| {
        let embs: Vec<Vec<f64>> = xs.iter().map(|x| e.embed_values(x).unwrap()).collect();
        relcon_loss(&embs[0], &embs[1..], &distances, &cfg).unwrap()
    };
    let embs: Vec<Vec<f64>> = xs.iter().map(|x| enc.embed_values(x).unwrap()).collect();
    let (_, da, dc) = relcon_loss_grad(&embs[0], &embs[1..], &distances, &cfg).unwrap();
    let mut grad = enc.params.zeros();
    enc.embedding_grad(&xs[0], &da, &mut grad).unwrap();
    for (x, d) in xs[1..].iter().zip(&dc) {
        enc.embedding_grad(x, d, &mut grad).unwrap();
    }
    let mut e = enc.clone();
    let f = |p: &[f64]| {
        e.params.values_mut().copy_from_slice(p);
        loss_of(&e)
    };
    let (err, at) = max_rel_error(f, enc.params.values(), &grad, H, FLOOR);
    assert!(err < TOL, "{pool:?}/{similarity:?}: relative error {err} at parameter {at}");
}

#[test]
fn relcon_gradient_through_mean_pooled_encoder() {
    relcon_through_encoder(Pool::Mean, Similarity::Cosine);
    relcon_through_encoder(Pool::Mean, Similarity::Dot);
}

#[test]
fn relcon_gradient_through_max_pooled_encoder() {
    relcon_through_encoder(Pool::Max, Similarity::Cosine);
}

#[test]
fn relcon_gradient_wrt_embeddings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for similarity in [Similarity::Cosine, Similarity::Dot] {
        let cfg = LossConfig { temperature: 0.3, similarity };
        let d = 5;
        let n = 6;
        let flat: Vec<f64> = (0..d * (n + 1)).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let distances: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let split = |v: &[f64]| (v[..d].to_vec(), v[d..].chunks(d).map(<[f64]>::to_vec).collect::<Vec<_>>());
        let (a, c) = split(&flat);
        let (_, da, dc) = relcon_loss_grad(&a, &c, &distances, &cfg).unwrap();
        let analytic: Vec<f64> = da.into_iter().chain(dc.into_iter().flatten()).collect();
        let f = |v: &[f64]| {
            let (a, c) = split(v);
            relcon_loss(&a, &c, &distances, &cfg).unwrap()
        };
        let (err, at) = max_rel_error(f, &flat, &analytic, H, FLOOR);
        assert!(err < TOL, "{similarity:?}: relative error {err} at coordinate {at}");
    }
}
