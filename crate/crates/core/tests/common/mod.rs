#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use recon_core::data::{FeaturePair, GroundTruth};
use recon_core::model::SimilarityModel;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Pair with 1..=max_items random Gaussian items per modality.
pub fn random_pair(rng: &mut ChaCha8Rng, id: u32, dv: usize, dl: usize, max_items: usize) -> FeaturePair {
    let nv = rng.random_range(1..=max_items);
    let nl = rng.random_range(1..=max_items);
    FeaturePair {
        pair_id: id,
        visual: gaussian(rng, nv, dv, 1.0).mapv(|v| v as f32),
        text: gaussian(rng, nl, dl, 1.0).mapv(|v| v as f32),
        label: 1,
        ground_truth: Some(GroundTruth {
            true_match: true,
            caption_source: id,
            objects: None,
        }),
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, dv: usize, dl: usize, max_items: usize) -> Vec<FeaturePair> {
    (0..n as u32).map(|id| random_pair(rng, id, dv, dl, max_items)).collect()
}

/// Random encoders, a perturbed identity head and non-zero biases.
pub fn random_model(rng: &mut ChaCha8Rng, dv: usize, dl: usize, de: usize) -> SimilarityModel {
    let mut m = SimilarityModel::random(dv, dl, de, rng.random()).unwrap();
    m.similarity = Array2::eye(de) + gaussian(rng, de, de, 0.2);
    m.visual_bias = Array1::from_shape_simple_fn(de, || rng.random_range(-0.3..0.3));
    m.text_bias = Array1::from_shape_simple_fn(de, || rng.random_range(-0.3..0.3));
    m
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| ((x - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Softmax with stored probabilities floored at 1e-8 and renormalized.
pub fn floored_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let p: Vec<f64> = softmax(row, tau).into_iter().map(|v| v.max(1e-8)).collect();
    let s: f64 = p.iter().sum();
    p.iter().map(|v| v / s).collect()
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}


/// Max relative error of a model loss's analytic gradient.
pub fn check_params<F>(model: &SimilarityModel, loss: F) -> f64
where
    F: Fn(&SimilarityModel) -> recon_core::training::LossEval,
{
    recon_core::numerics::grad_check(
        |flat| {
            let m = model.with_flat(flat).unwrap();
            let eval = loss(&m);
            (eval.value, eval.grad.flatten())
        },
        &model.flatten(),
        recon_core::numerics::DEFAULT_STEP,
    )
    .unwrap()
    .max_relative_error
}

/// Random batch (2..=8 pairs), model (d_e in 2..=8) and temperatures.
pub fn grad_setup(seed: u64) -> (Vec<FeaturePair>, SimilarityModel, recon_core::config::TrainConfig) {
    let mut r = rng(seed);
    let n = r.random_range(2..=8);
    let (dv, dl, de) = (r.random_range(2..=7), r.random_range(2..=7), r.random_range(2..=8));
    let batch = random_batch(&mut r, n, dv, dl, 5);
    let model = random_model(&mut r, dv, dl, de);
    let config = recon_core::config::TrainConfig {
        relation_tau: r.random_range(0.2..1.0),
        tau: r.random_range(0.2..1.0),
        ..Default::default()
    };
    (batch, model, config)
}
