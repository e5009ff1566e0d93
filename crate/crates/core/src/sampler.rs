//! Classifier-free-guided sampling from pure noise.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::conditioning::{self, Variant};
use crate::diffusion::{DenoiserInputs, DiffusionModel};
use crate::error::{Error, Result};
use crate::image::{EdgeMap, ImageBuffer};
use crate::params::{self, seeded_rng, SeededRng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ddpm => "ddpm",
            Method::Ddim => "ddim",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            _ => Err(Error::Config(format!("unknown sampler {s:?} (expected ddpm or ddim)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub method: Method,
    pub eta: f64,
    pub seed: u64,
    /// Concat3 only.
    pub aug_level: usize,
    /// Also blank the sketch channels in the unconditional branch.
    pub null_sketch: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            method: Method::Ddim,
            eta: 0.0,
            seed: 0,
            aug_level: 0,
            null_sketch: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.steps == 0 || self.steps > schedule.len() {
            return Err(Error::InvalidInput(format!(
                "steps must lie in [1, {}], got {}",
                schedule.len(),
                self.steps
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "guidance scale must be >= 0, got {}",
                self.guidance_scale
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidInput(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// `ε(∅) + s · (ε(c) − ε(∅))`; at `s = 1` returns `eps_cond` itself.
pub fn guided_eps(eps_uncond: &Tensor, eps_cond: &Tensor, s: f64) -> Result<Tensor> {
    if eps_uncond.dims() != eps_cond.dims() {
        return Err(Error::shape(eps_uncond.dims(), eps_cond.dims()));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * s)?)?)
}

/// Descending timesteps `T·(i+1)/N` for `i = N-1 … 0`.
pub fn timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    (0..steps).rev().map(|i| (i + 1) * t_max / steps).collect()
}

/// Reverse update from `t` to `t - 1`.
pub fn sampler_step(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    schedule: &NoiseSchedule,
    method: Method,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if t == 0 {
        return Err(Error::InvalidInput("sampler step needs t >= 1".into()));
    }
    sampler_step_to(z_t, eps_hat, t, t - 1, schedule, method, eta, rng)
}

/// Reverse update from `t` to any earlier `prev` (`prev = 0` is the clean
/// estimate and adds no noise).
#[allow(clippy::too_many_arguments)]
pub fn sampler_step_to(
    z_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    prev: usize,
    schedule: &NoiseSchedule,
    method: Method,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if t == 0 || t > schedule.len() || prev >= t {
        return Err(Error::InvalidInput(format!(
            "invalid reverse step {t} -> {prev} for T = {}",
            schedule.len()
        )));
    }
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::shape(z_t.dims(), eps_hat.dims()));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(prev);
    let x0 = ((z_t - (eps_hat * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
    let (mean, std) = match method {
        Method::Ddim => {
            let sigma = eta * ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).max(0.0).sqrt();
            let dir = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt();
            (((&x0 * ab_p.sqrt())? + (eps_hat * dir)?)?, sigma)
        }
        Method::Ddpm => {
            let beta = 1.0 - ab_t / ab_p;
            let c0 = ab_p.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_p) / (1.0 - ab_t);
            let var = beta * (1.0 - ab_p) / (1.0 - ab_t);
            (((&x0 * c0)? + (z_t * ct)?)?, var.max(0.0).sqrt())
        }
    };
    if prev == 0 || std == 0.0 {
        return Ok(mean);
    }
    let noise = params::randn(rng, z_t.shape(), z_t.device())?;
    Ok((mean + (noise * std)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Cond,
    Uncond,
}

/// The reverse chain from `z_t_max`, with the noise predictor supplied by the
/// caller. The unconditional branch is not evaluated when `s = 1`.
pub fn run_chain(
    z: Tensor,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
    mut eps_fn: impl FnMut(&Tensor, usize, Branch) -> Result<Tensor>,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let ts = timesteps(schedule.len(), cfg.steps);
    let mut z = z;
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps_c = eps_fn(&z, t, Branch::Cond)?;
        let eps = if cfg.guidance_scale == 1.0 {
            eps_c
        } else {
            let eps_u = eps_fn(&z, t, Branch::Uncond)?;
            guided_eps(&eps_u, &eps_c, cfg.guidance_scale)?
        };
        z = sampler_step_to(&z, &eps, t, prev, schedule, cfg.method, cfg.eta, rng)?;
    }
    Ok(z)
}

/// Clean latent `(1, c_z, h, w)` for `sketch` and `prompt`.
pub fn sample_latent(model: &DiffusionModel, sketch: &EdgeMap, prompt: &str, cfg: &SamplerConfig) -> Result<Tensor> {
    cfg.validate(model.schedule())?;
    let dev = model.device().clone();
    let (h, w) = model.latent_hw();
    let res = model.config().resolution;
    if sketch.height() != res || sketch.width() != res {
        return Err(Error::InvalidInput(format!(
            "sketch is {}x{}, model expects {res}x{res}",
            sketch.height(),
            sketch.width()
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    let z = params::randn(&mut rng, (1, model.latent_spec().channels, h, w), &dev)?;
    let (concat, aug) = match model.variant() {
        Variant::Concat1 => (conditioning::make_concat1(sketch, (h, w), &dev)?, None),
        Variant::Concat3 => {
            let (c, level) =
                conditioning::make_concat3(sketch, (h, w), cfg.aug_level, model.aug_schedule(), &mut rng, &dev)?;
            (c, Some(vec![level]))
        }
    };
    let concat = concat.unsqueeze(0)?;
    let uncond_concat = if cfg.null_sketch { concat.zeros_like()? } else { concat.clone() };
    let text_c = model.embed_prompt(prompt)?.unsqueeze(0)?;
    let text_u = model.null_embedding().unsqueeze(0)?;
    run_chain(z, model.schedule(), cfg, &mut rng, |z, t, branch| {
        let (c, text) = match branch {
            Branch::Cond => (&concat, &text_c),
            Branch::Uncond => (&uncond_concat, &text_u),
        };
        model.predict_eps(&DenoiserInputs::new(z, c, vec![t], text.clone(), aug.clone())?)
    })
}

/// Samples and decodes an image; deterministic in `(cfg, inputs)`.
pub fn sample(
    model: &DiffusionModel,
    vae: &Autoencoder,
    sketch: &EdgeMap,
    prompt: &str,
    cfg: &SamplerConfig,
) -> Result<ImageBuffer> {
    model.check_vae(vae)?;
    let z = sample_latent(model, sketch, prompt, cfg)?;
    Ok(vae.decode_batch(&z)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;
    use candle_core::Device;

    #[test]
    fn strided_timesteps_end_at_one_step() {
        assert_eq!(timesteps(10, 5), [10, 8, 6, 4, 2]);
        assert_eq!(timesteps(200, 200).last(), Some(&1));
        assert_eq!(timesteps(200, 50)[0], 200);
    }

    #[test]
    fn ddpm_last_step_is_noise_free() {
        let s = NoiseSchedule::new(20, ScheduleKind::Linear).unwrap();
        let z = Tensor::new(&[0.5f32, -0.25], &Device::Cpu).unwrap();
        let e = Tensor::new(&[0.1f32, 0.2], &Device::Cpu).unwrap();
        let a = sampler_step(&z, &e, 1, &s, Method::Ddpm, 0.0, &mut seeded_rng(1)).unwrap();
        let b = sampler_step(&z, &e, 1, &s, Method::Ddpm, 0.0, &mut seeded_rng(2)).unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), b.to_vec1::<f32>().unwrap());
        assert!(sampler_step(&z, &e, 0, &s, Method::Ddpm, 0.0, &mut seeded_rng(1)).is_err());
    }
}
