#![allow(dead_code)]

use std::path::{Path, PathBuf};

use s2p_core::autoencoder::{Autoencoder, AutoencoderConfig};
use s2p_core::diffusion::{Architecture, DiffusionConfig, DiffusionModel, LatentSpec};
use s2p_core::text::{build_vocab, TextEncoderConfig};

pub const RESOLUTION: usize = 16;

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
            seq_len: 4,
            width: 8,
            heads: 2,
        },
        max_vocab: 32,
    }
}

pub fn tiny_config() -> DiffusionConfig {
    DiffusionConfig {
        timesteps: 20,
        t_aug: 10,
        resolution: RESOLUTION,
        steps: 2,
        batch_size: 2,
        ..Default::default()
    }
}

pub fn tiny_model(vae: &Autoencoder) -> DiffusionModel {
    let vocab = build_vocab(&["a mountain under a blue sky"], 32).unwrap();
    DiffusionModel::new(tiny_config(), tiny_arch(), LatentSpec::of(vae).unwrap(), vocab).unwrap()
}

/// Writes an untrained tiny model pair and returns `(diffusion, vae)` paths.
pub fn write_checkpoints(dir: &Path) -> (PathBuf, PathBuf) {
    let vae = tiny_vae();
    let model = tiny_model(&vae);
    let (c, v) = (dir.join("diff.ckpt"), dir.join("vae.ckpt"));
    vae.save(&v).unwrap();
    model.save(&c).unwrap();
    (c, v)
}

/// Black line on white, `size`².
pub fn line_sketch_png(size: usize) -> Vec<u8> {
    let img = s2p_core::image::ImageBuffer::from_fn(size, size, 1, |y, _, _| if y == size / 2 { 0.0 } else { 1.0 })
        .unwrap();
    img.encode_png().unwrap()
}
