#![allow(dead_code)]

use s2p_core::autoencoder::{Autoencoder, AutoencoderConfig};
use s2p_core::data::{synthetic_scene, Example};
use s2p_core::diffusion::{Architecture, DiffusionConfig, DiffusionModel, LatentSpec};
use s2p_core::edge::{standardize, EdgeParams};
use s2p_core::text::{build_vocab, TextEncoderConfig};

pub fn tiny_vae() -> Autoencoder {
    let cfg = AutoencoderConfig {
        base_width: 8,
        steps: 0,
        ..Default::default()
    };
    Autoencoder::new(cfg, 3).unwrap()
}

pub fn tiny_arch() -> Architecture {
    Architecture {
        widths: [8, 8, 8],
        emb_dim: 8,
        heads: 2,
        groups: 4,
        text: TextEncoderConfig {
            seq_len: 6,
            width: 8,
            heads: 2,
        },
        max_vocab: 64,
    }
}

pub fn tiny_config(resolution: usize) -> DiffusionConfig {
    DiffusionConfig {
        timesteps: 20,
        t_aug: 10,
        resolution,
        steps: 3,
        batch_size: 2,
        ..Default::default()
    }
}

pub fn examples(n: u64, resolution: usize) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let (photo, caption) = synthetic_scene(i, resolution);
            let edge = standardize(&photo, &EdgeParams::default()).unwrap();
            Example { photo, edge, caption }
        })
        .collect()
}

pub fn tiny_model(vae: &Autoencoder, config: DiffusionConfig) -> DiffusionModel {
    let vocab = build_vocab(&["a mountain under a blue sky", "a lake at dusk"], 64).unwrap();
    DiffusionModel::new(config, tiny_arch(), LatentSpec::of(vae).unwrap(), vocab).unwrap()
}
