#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use skillmix_core::{Model, ModelConfig, ParamStore, Tensor};

pub fn micro_model(seed: u64) -> Model {
    Model::new(ModelConfig::micro(), seed).unwrap()
}

pub fn model_with(seed: u64, edit: impl FnOnce(&mut ModelConfig)) -> Model {
    let mut cfg = ModelConfig::micro();
    edit(&mut cfg);
    Model::new(cfg, seed).unwrap()
}

/// Adds N(0, std) noise to every parameter whose name starts with `prefix`.
pub fn jitter(store: &mut ParamStore, prefix: &str, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id).collect();
    for id in ids {
        for x in store.tensor_mut(id).data_mut() {
            *x += normal.sample(&mut rng);
        }
    }
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
}

pub fn snapshot(store: &ParamStore, prefix: &str) -> Vec<(String, Vec<f64>)> {
    store
        .iter()
        .filter(|(_, p)| p.name.starts_with(prefix))
        .map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec()))
        .collect()
}

pub fn rows(t: &Tensor, start: usize, len: usize) -> Vec<f64> {
    let c = t.cols();
    t.data()[start * c..(start + len) * c].to_vec()
}
