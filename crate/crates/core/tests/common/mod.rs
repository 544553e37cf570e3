#![allow(dead_code)]

use partvit_core::{FaceModel, ModelConfig, Preset, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn tiny() -> ModelConfig {
    ModelConfig::preset(Preset::FvitTiny)
}

/// Tiny model with every parameter re-drawn at a healthy scale, so that no
/// branch is degenerate.
pub fn randomized_model(cfg: ModelConfig, classes: usize, seed: u64) -> FaceModel<f64> {
    let mut m = FaceModel::<f64>::new(cfg, classes, seed).unwrap();
    let mut r = rng(seed + 1);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let name = m.store.param(id).name.clone();
        let shape = m.store.get(id).shape().to_vec();
        if name.ends_with(".gamma") {
            let t = Tensor::<f64>::rand_uniform(&shape, 0.5, 1.5, &mut r);
            *m.store.get_mut(id) = t;
        } else if name.starts_with("landmark.head") {
            // keep landmarks away from the image border
            let t = Tensor::<f64>::randn(&shape, 0.05, &mut r);
            *m.store.get_mut(id) = t;
        } else if !name.starts_with("landmark.conv") {
            let t = Tensor::<f64>::randn(&shape, 0.2, &mut r);
            *m.store.get_mut(id) = t;
        }
    }
    m
}

pub fn images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(&[n, cfg.channels, cfg.image_height, cfg.image_width], 0.0, 1.0, &mut rng(seed))
}
