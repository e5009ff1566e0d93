mod common;

use candle_core::{Device, Tensor};
use s2p_core::image::EdgeMap;
use s2p_core::params::{randn, seeded_rng};
use s2p_core::sampler::{
    guided_eps, run_chain, sample, sample_latent, sampler_step, Branch, Method, SamplerConfig,
};
use s2p_core::schedule::{q_sample, NoiseSchedule, ScheduleKind};

fn vals(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1().unwrap()
}

#[test]
fn guided_scalar_substitution() {
    let dev = Device::Cpu;
    let u = Tensor::new(&[0.2f64], &dev).unwrap();
    let c = Tensor::new(&[0.5f64], &dev).unwrap();
    let g: Vec<f64> = guided_eps(&u, &c, 3.0).unwrap().to_vec1().unwrap();
    assert!((g[0] - 1.1).abs() < 1e-12);
    let bad = Tensor::new(&[0.5f64, 0.1], &dev).unwrap();
    assert!(guided_eps(&u, &bad, 3.0).is_err());
}

#[test]
fn exact_noise_oracle_recovers_the_clean_latent() {
    let dev = Device::Cpu;
    let schedule = NoiseSchedule::new(200, ScheduleKind::Linear).unwrap();
    let z0 = randn(&mut seeded_rng(1), (1, 4, 8, 8), &dev).unwrap();
    let z_t = randn(&mut seeded_rng(2), (1, 4, 8, 8), &dev).unwrap();
    for (method, eta, steps) in [(Method::Ddim, 0.0, 20), (Method::Ddim, 1.0, 50), (Method::Ddpm, 0.0, 200)] {
        let cfg = SamplerConfig {
            steps,
            method,
            eta,
            guidance_scale: 4.0,
            ..Default::default()
        };
        let out = run_chain(z_t.clone(), &schedule, &cfg, &mut seeded_rng(3), |z, t, _| {
            let ab = schedule.alpha_bar(t);
            Ok(((z - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
        })
        .unwrap();
        let err = vals(&out).iter().zip(vals(&z0)).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-3, "{method} eta {eta}: {err}");
    }
}

#[test]
fn step_consistency_with_forward_process() {
    // With eps equal to the noise used to build z_t, one DDIM step to t - 1
    // lands on q_sample(z0, t - 1, eps).
    let dev = Device::Cpu;
    let s = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
    let z0 = randn(&mut seeded_rng(4), 32, &dev).unwrap();
    let eps = randn(&mut seeded_rng(5), 32, &dev).unwrap();
    let zt = q_sample(&z0, 30, &eps, &s).unwrap();
    let prev = sampler_step(&zt, &eps, 30, &s, Method::Ddim, 0.0, &mut seeded_rng(0)).unwrap();
    let want = q_sample(&z0, 29, &eps, &s).unwrap();
    for (a, b) in vals(&prev).iter().zip(vals(&want)) {
        assert!((a - b).abs() < 1e-4);
    }
    assert!(sampler_step(&zt, &eps, 51, &s, Method::Ddim, 0.0, &mut seeded_rng(0)).is_err());
}

#[test]
fn unit_scale_skips_the_unconditional_branch() {
    let s = NoiseSchedule::new(20, ScheduleKind::Linear).unwrap();
    let z = Tensor::zeros(4, candle_core::DType::F32, &Device::Cpu).unwrap();
    let mut calls = Vec::new();
    let cfg = SamplerConfig {
        steps: 5,
        guidance_scale: 1.0,
        ..Default::default()
    };
    run_chain(z.clone(), &s, &cfg, &mut seeded_rng(0), |z, _, b| {
        calls.push(b);
        Ok(z.zeros_like()?)
    })
    .unwrap();
    assert_eq!(calls, vec![Branch::Cond; 5]);
    calls.clear();
    let cfg = SamplerConfig { guidance_scale: 2.0, ..cfg };
    run_chain(z, &s, &cfg, &mut seeded_rng(0), |z, _, b| {
        calls.push(b);
        Ok(z.zeros_like()?)
    })
    .unwrap();
    assert_eq!(calls.iter().filter(|&&b| b == Branch::Uncond).count(), 5);
}

#[test]
fn sampling_is_deterministic_and_total() {
    let vae = common::tiny_vae();
    let model = common::tiny_model(&vae, common::tiny_config(16));
    let sketch = common::examples(1, 16).remove(0).edge;
    let cfg = SamplerConfig {
        steps: 5,
        guidance_scale: 3.0,
        seed: 9,
        ..Default::default()
    };
    let a = sample(&model, &vae, &sketch, "a mountain", &cfg).unwrap();
    let b = sample(&model, &vae, &sketch, "a mountain", &cfg).unwrap();
    assert_eq!(a.encode_png().unwrap(), b.encode_png().unwrap());

    let other = sample(&model, &vae, &sketch, "a lake", &cfg).unwrap();
    assert!(a.data().iter().zip(other.data()).any(|(x, y)| x != y));

    let blank = SamplerConfig {
        guidance_scale: 1.0,
        ..cfg
    };
    let img = sample(&model, &vae, &EdgeMap::zeros(16, 16), "", &blank).unwrap();
    assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));

    assert!(sample_latent(&model, &EdgeMap::zeros(8, 8), "", &cfg).is_err());
    let bad = SamplerConfig { steps: 0, ..cfg };
    assert!(sample_latent(&model, &sketch, "", &bad).is_err());
    let other_vae = s2p_core::autoencoder::Autoencoder::new(vae.config().clone(), 99).unwrap();
    assert!(sample(&model, &other_vae, &sketch, "", &cfg).is_err());
}

#[test]
fn concat3_sampling_uses_the_aug_level() {
    let vae = common::tiny_vae();
    let config = s2p_core::diffusion::DiffusionConfig {
        variant: s2p_core::conditioning::Variant::Concat3,
        ..common::tiny_config(16)
    };
    let model = common::tiny_model(&vae, config);
    let sketch = common::examples(1, 16).remove(0).edge;
    let cfg = SamplerConfig {
        steps: 3,
        aug_level: 5,
        ..Default::default()
    };
    let a = sample_latent(&model, &sketch, "a lake", &cfg).unwrap();
    let b = sample_latent(&model, &sketch, "a lake", &SamplerConfig { aug_level: 0, ..cfg }).unwrap();
    assert_ne!(vals(&a), vals(&b));
    assert!(sample_latent(&model, &sketch, "a lake", &SamplerConfig { aug_level: 10, ..cfg }).is_err());
}
