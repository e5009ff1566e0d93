//! Sketch condition channels for the one- and three-channel variants.

use std::fmt;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::EdgeMap;
use crate::params::{self, SeededRng};
use crate::schedule::{q_sample_with, NoiseSchedule};

/// Number of augmentation levels in the three-channel variant.
pub const DEFAULT_T_AUG: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Concat1,
    Concat3,
}

impl Variant {
    pub fn channels(self) -> usize {
        match self {
            Variant::Concat1 => 1,
            Variant::Concat3 => 3,
        }
    }

    pub fn uses_aug_level(self) -> bool {
        self == Variant::Concat3
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Concat1 => "concat1",
            Variant::Concat3 => "concat3",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat1" => Ok(Variant::Concat1),
            "concat3" => Ok(Variant::Concat3),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected concat1 or concat3)"
            ))),
        }
    }
}

/// Everything the denoiser is conditioned on besides `z_t` and `t`.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    /// `(k, h, w)` sketch channels.
    pub concat: Tensor,
    /// `(L, d_txt)` text embedding.
    pub text: Tensor,
    pub aug_level: Option<usize>,
    pub variant: Variant,
}

impl ConditionBundle {
    pub fn new(concat: Tensor, text: Tensor, aug_level: Option<usize>, variant: Variant) -> Result<Self> {
        let (k, _, _) = concat.dims3()?;
        if k != variant.channels() {
            return Err(Error::shape(format!("{} condition channels", variant.channels()), k));
        }
        if aug_level.is_some() != variant.uses_aug_level() {
            return Err(Error::InvalidInput(format!(
                "aug_level must be {} for {variant}",
                if variant.uses_aug_level() { "present" } else { "absent" }
            )));
        }
        text.dims2()?;
        Ok(Self {
            concat,
            text,
            aug_level,
            variant,
        })
    }
}

/// Block mean of `edge` onto `(h, w)`; the size must be an integer multiple.
fn area_downsample(edge: &EdgeMap, (h, w): (usize, usize)) -> Result<Vec<f32>> {
    let (eh, ew) = (edge.height(), edge.width());
    if h == 0 || w == 0 || eh % h != 0 || ew % w != 0 {
        return Err(Error::InvalidInput(format!(
            "edge map {eh}x{ew} is not an integer multiple of latent grid {h}x{w}"
        )));
    }
    let (fy, fx) = (eh / h, ew / w);
    let mut out = Vec::with_capacity(h * w);
    for by in 0..h {
        for bx in 0..w {
            let mut acc = 0.0f64;
            for y in by * fy..(by + 1) * fy {
                for x in bx * fx..(bx + 1) * fx {
                    acc += edge.get(y, x) as f64;
                }
            }
            out.push((acc / (fy * fx) as f64) as f32);
        }
    }
    Ok(out)
}

/// `(1, h, w)` channel in `[-1, 1]`: background −1, edges +1.
pub fn make_concat1(edge: &EdgeMap, latent_hw: (usize, usize), device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = area_downsample(edge, latent_hw)?
        .into_iter()
        .map(|v| 2.0 * v - 1.0)
        .collect();
    Ok(Tensor::from_vec(data, (1, latent_hw.0, latent_hw.1), device)?)
}

/// `(3, h, w)` replicated channels, forward-diffused to `aug_level` under the
/// augmentation schedule. Level 0 returns the clean channels untouched.
pub fn make_concat3(
    edge: &EdgeMap,
    latent_hw: (usize, usize),
    aug_level: usize,
    aug_schedule: &NoiseSchedule,
    rng: &mut SeededRng,
    device: &Device,
) -> Result<(Tensor, usize)> {
    if aug_level >= aug_schedule.len() {
        return Err(Error::InvalidInput(format!(
            "aug_level {aug_level} outside [0, {})",
            aug_schedule.len()
        )));
    }
    let one = make_concat1(edge, latent_hw, device)?;
    let clean = Tensor::cat(&[&one, &one, &one], 0)?;
    if aug_level == 0 {
        return Ok((clean, 0));
    }
    let eps = params::randn(rng, clean.shape(), device)?;
    let noisy = q_sample_with(&clean, aug_schedule.alpha_bar(aug_level), &eps)?;
    Ok((noisy, aug_level))
}

/// Zeroes the channels with probability `p`; returns whether it did.
pub fn drop_sketch(channels: &Tensor, p: f64, rng: &mut impl Rng) -> Result<(Tensor, bool)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidInput(format!("drop probability {p} outside [0, 1]")));
    }
    if rng.random::<f64>() < p {
        Ok((channels.zeros_like()?, true))
    } else {
        Ok((channels.clone(), false))
    }
}
