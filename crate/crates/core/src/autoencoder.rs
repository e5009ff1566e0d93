//! The latent space diffusion runs in: a small convolutional VAE with its
//! own training loop and latent-scale calibration.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{group_norm, AdamW, Conv2d, GroupNorm, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::config::{self, KeyValues};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::nn::{conv3x3, ResBlock};
use crate::params::{self, seeded_rng, ParamStore, SeededRng};

pub const CHECKPOINT_KIND: &str = "autoencoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub kl_weight: f64,
    pub base_width: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            downsample_factor: 4,
            latent_channels: 4,
            kl_weight: 1e-6,
            base_width: 32,
            learning_rate: 1e-3,
            steps: 2000,
            batch_size: 8,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if ![2, 4, 8].contains(&self.downsample_factor) {
            return Err(Error::Config(format!(
                "downsample_factor must be 2, 4 or 8, got {}",
                self.downsample_factor
            )));
        }
        if self.latent_channels == 0 || self.base_width < 4 || self.base_width % 4 != 0 {
            return Err(Error::Config(
                "latent_channels must be positive and base_width a positive multiple of 4".into(),
            ));
        }
        if !(self.kl_weight >= 0.0) || !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config(
                "kl_weight must be >= 0, learning_rate > 0, batch_size > 0".into(),
            ));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channel width after each downsampling stage.
    fn widths(&self) -> Vec<usize> {
        (0..self.levels())
            .map(|i| if i == 0 { self.base_width } else { 2 * self.base_width })
            .collect()
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = Self::default();
        kv.check_keys(&[
            "downsample_factor",
            "latent_channels",
            "kl_weight",
            "base_width",
            "learning_rate",
            "steps",
            "batch_size",
        ])?;
        config::set(kv, "downsample_factor", &mut cfg.downsample_factor)?;
        config::set(kv, "latent_channels", &mut cfg.latent_channels)?;
        config::set(kv, "kl_weight", &mut cfg.kl_weight)?;
        config::set(kv, "base_width", &mut cfg.base_width)?;
        config::set(kv, "learning_rate", &mut cfg.learning_rate)?;
        config::set(kv, "steps", &mut cfg.steps)?;
        config::set(kv, "batch_size", &mut cfg.batch_size)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Scaled latent, channels-first `(c_z, h, w)`.
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::shape("(c, h, w)", t.dims()));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.0.dims()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Mean,
    Sample,
}

struct Encoder {
    downs: Vec<Conv2d>,
    mid: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(cfg: &AutoencoderConfig, vb: candle_nn::VarBuilder) -> candle_core::Result<Self> {
        let widths = cfg.widths();
        let mut downs = Vec::new();
        let mut cin = 3;
        for (i, &w) in widths.iter().enumerate() {
            downs.push(conv3x3(cin, w, 2, vb.pp(format!("down{i}")))?);
            cin = w;
        }
        let groups = group_count(cin);
        Ok(Self {
            downs,
            mid: ResBlock::new(cin, cin, None, groups, vb.pp("mid"))?,
            norm_out: group_norm(groups, cin, 1e-5, vb.pp("norm_out"))?,
            conv_out: conv3x3(cin, 2 * cfg.latent_channels, 1, vb.pp("conv_out"))?,
        })
    }

    /// Returns `(mean, logvar, features)`; `x` in `[-1, 1]`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<(Tensor, Tensor, Vec<Tensor>)> {
        let mut feats = Vec::new();
        let mut h = x.clone();
        for d in &self.downs {
            h = d.forward(&h)?.silu()?;
            feats.push(h.clone());
        }
        let h = self.mid.forward(&h, None)?;
        feats.push(h.clone());
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let c = out.dim(1)? / 2;
        let mean = out.narrow(1, 0, c)?;
        let logvar = out.narrow(1, c, c)?.clamp(-30f32, 20f32)?;
        Ok((mean, logvar, feats))
    }
}

struct Decoder {
    conv_in: Conv2d,
    mid: ResBlock,
    ups: Vec<Conv2d>,
}

impl Decoder {
    fn new(cfg: &AutoencoderConfig, vb: candle_nn::VarBuilder) -> candle_core::Result<Self> {
        let widths = cfg.widths();
        let top = *widths.last().unwrap();
        let mut ups = Vec::new();
        // Sub-pixel upsampling: conv to 4× the target width, then shuffle.
        for i in (0..widths.len()).rev() {
            let cout = if i == 0 { 3 } else { widths[i - 1] };
            ups.push(conv3x3(widths[i], 4 * cout, 1, vb.pp(format!("up{i}")))?);
        }
        Ok(Self {
            conv_in: conv3x3(cfg.latent_channels, top, 1, vb.pp("conv_in"))?,
            mid: ResBlock::new(top, top, None, group_count(top), vb.pp("mid"))?,
            ups,
        })
    }

    /// Output in roughly `[-1, 1]`, unclamped.
    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.mid.forward(&self.conv_in.forward(z)?, None)?;
        for up in &self.ups {
            h = candle_nn::ops::pixel_shuffle(&up.forward(&h.silu()?)?, 2)?;
        }
        Ok(h)
    }
}

fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

/// Trained (or training) autoencoder with its calibrated latent scale.
pub struct Autoencoder {
    config: AutoencoderConfig,
    store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    latent_scale: f64,
    step: usize,
    device: Device,
}

impl std::fmt::Debug for Autoencoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Autoencoder")
            .field("config", &self.config)
            .field("latent_scale", &self.latent_scale)
            .field("step", &self.step)
            .finish()
    }
}

impl Autoencoder {
    /// Freshly initialized weights; latent scale 1.
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        Self::with_store(config, ParamStore::new(seed), 1.0, 0)
    }

    fn with_store(config: AutoencoderConfig, store: ParamStore, latent_scale: f64, step: usize) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let vb = store.var_builder(DType::F32, &device);
        let encoder = Encoder::new(&config, vb.pp("encoder"))?;
        let decoder = Decoder::new(&config, vb.pp("decoder"))?;
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            latent_scale,
            step,
            device,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn fingerprint(&self) -> Result<String> {
        self.store.fingerprint()
    }

    fn check_image(&self, image: &ImageBuffer) -> Result<()> {
        let f = self.config.downsample_factor;
        if image.channels() != 3 {
            return Err(Error::InvalidInput(format!(
                "autoencoder expects 3 channels, got {}",
                image.channels()
            )));
        }
        if image.is_empty() || image.height() % f != 0 || image.width() % f != 0 {
            return Err(Error::InvalidInput(format!(
                "image {}x{} is not divisible by downsample factor {f}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn batch_tensor(&self, images: &[ImageBuffer]) -> Result<Tensor> {
        let ts = images
            .iter()
            .map(|img| {
                self.check_image(img)?;
                img.to_tensor(&self.device)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(((Tensor::stack(&ts, 0)? * 2.0)? - 1.0)?)
    }

    pub fn encode(&self, image: &ImageBuffer, mode: EncodeMode, rng: &mut SeededRng) -> Result<LatentTensor> {
        let z = self.encode_batch(std::slice::from_ref(image), mode, rng)?;
        LatentTensor::new(z.get(0)?)
    }

    /// Scaled latents `(B, c_z, h, w)`.
    pub fn encode_batch(&self, images: &[ImageBuffer], mode: EncodeMode, rng: &mut SeededRng) -> Result<Tensor> {
        let x = self.batch_tensor(images)?;
        let (mean, logvar, _) = self.encoder.forward(&x)?;
        let z = match mode {
            EncodeMode::Mean => mean,
            EncodeMode::Sample => {
                let eps = params::randn(rng, mean.shape(), &self.device)?;
                (mean + (logvar * 0.5)?.exp()?.mul(&eps)?)?
            }
        };
        Ok((z * self.latent_scale)?.detach())
    }

    pub fn decode(&self, latent: &LatentTensor) -> Result<ImageBuffer> {
        let out = self.decode_batch(&latent.tensor().unsqueeze(0)?)?;
        Ok(out.into_iter().next().unwrap())
    }

    pub fn decode_batch(&self, latents: &Tensor) -> Result<Vec<ImageBuffer>> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.config.latent_channels {
            return Err(Error::shape(
                format!("{} latent channels", self.config.latent_channels),
                latents.dims(),
            ));
        }
        let y = self.decoder.forward(&(latents / self.latent_scale)?)?;
        let img = ((y + 1.0)? / 2.0)?.detach();
        (0..img.dim(0)?)
            .map(|i| ImageBuffer::from_tensor(&img.get(i)?))
            .collect()
    }

    /// Encoder activations for `x` in `[0, 1]`, used by the perceptual metric.
    pub fn encoder_features(&self, image: &ImageBuffer) -> Result<Vec<Tensor>> {
        if image.channels() != 3 || image.is_empty() {
            return Err(Error::InvalidInput("features need a non-empty RGB image".into()));
        }
        let x = ((image.to_tensor(&self.device)?.unsqueeze(0)? * 2.0)? - 1.0)?;
        let (_, _, feats) = self.encoder.forward(&x)?;
        Ok(feats.into_iter().map(|f| f.detach()).collect())
    }

    /// `(total, reconstruction MSE in [0,1] pixel units, KL per image)`.
    fn loss(&self, x: &Tensor, rng: &mut SeededRng) -> Result<(Tensor, f64, f64)> {
        let (mean, logvar, _) = self.encoder.forward(x)?;
        let eps = params::randn(rng, mean.shape(), &self.device)?;
        let z = (&mean + (&logvar * 0.5)?.exp()?.mul(&eps)?)?;
        let recon = self.decoder.forward(&z)?;
        // Both tensors live in [-1, 1]; a quarter of that MSE is the [0, 1] MSE.
        let mse = ((recon - x)?.sqr()?.mean_all()? * 0.25)?;
        let batch = x.dim(0)? as f64;
        let kl = (((mean.sqr()? + logvar.exp()?)? - 1.0)? - &logvar)?
            .sum_all()?
            .affine(0.5 / batch, 0.0)?;
        let total = (&mse + (&kl * self.config.kl_weight)?)?;
        Ok((
            total,
            mse.to_scalar::<f32>()? as f64,
            kl.to_scalar::<f32>()? as f64,
        ))
    }

    /// Sets the latent scale to `1 / std` of unscaled posterior means over
    /// `images` (one pass, deterministic).
    pub fn calibrate(&mut self, images: &[ImageBuffer]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut values: Vec<f64> = Vec::new();
        for chunk in images.chunks(8) {
            let x = self.batch_tensor(chunk)?;
            let (mean, _, _) = self.encoder.forward(&x)?;
            values.extend(mean.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 1e-12 && std.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "cannot calibrate latent scale: latent std {std}"
            )));
        }
        self.latent_scale = 1.0 / std;
        Ok(self.latent_scale)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "step": self.step,
            "latent_scale": self.latent_scale,
        });
        Ok(Checkpoint::new(header, self.store.named_tensors()))
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind() != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint(format!(
                "expected an {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.kind()
            )));
        }
        let config: AutoencoderConfig = serde_json::from_value(ck.header["config"].clone())
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let latent_scale = ck.header["latent_scale"]
            .as_f64()
            .filter(|s| *s > 0.0)
            .ok_or_else(|| Error::Checkpoint("missing or non-positive latent_scale".into()))?;
        let step = ck.header["step"].as_u64().unwrap_or(0) as usize;
        let count = ck.tensors.len();
        let store = ParamStore::from_tensors(ck.tensors)?;
        let ae = Self::with_store(config, store, latent_scale, step)?;
        params::expect_count(&ae.store, count, CHECKPOINT_KIND)?;
        Ok(ae)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path, &Device::Cpu)?)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AutoencoderLog {
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// Reconstruction MSE (pixel units in `[0, 1]`) per step.
    pub recon: Vec<f64>,
}

/// Trains from scratch on `images`, then calibrates the latent scale over the
/// same set.
pub fn train_autoencoder(
    images: &[ImageBuffer],
    config: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder, AutoencoderLog)> {
    train_autoencoder_with(images, config, seed, |_, _| {})
}

/// As [`train_autoencoder`], reporting `(step, loss)` after every step.
pub fn train_autoencoder_with(
    images: &[ImageBuffer],
    config: &AutoencoderConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(Autoencoder, AutoencoderLog)> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut ae = Autoencoder::new(config.clone(), seed)?;
    let data = ae.batch_tensor(images)?;
    let mut opt = AdamW::new(
        ae.store.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = seeded_rng(seed.wrapping_add(1));
    let mut order: Vec<usize> = Vec::new();
    let mut log = AutoencoderLog::default();
    let batch = config.batch_size.min(images.len());
    for step in 0..config.steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..images.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<u32> = order.drain(..batch).map(|i| i as u32).collect();
        let x = data.index_select(&Tensor::new(idx.as_slice(), &ae.device)?, 0)?;
        let (loss, recon, _) = ae.loss(&x, &mut rng)?;
        opt.backward_step(&loss)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "autoencoder loss diverged at step {step}"
            )));
        }
        log.losses.push(value);
        log.recon.push(recon);
        on_step(step, value);
    }
    ae.step = config.steps;
    ae.calibrate(images)?;
    Ok((ae, log))
}

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if (a.height(), a.width(), a.channels()) != (b.height(), b.width(), b.channels()) {
        return Err(Error::shape(
            (a.height(), a.width(), a.channels()),
            (b.height(), b.width(), b.channels()),
        ));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig {
            base_width: 8,
            steps: 3,
            batch_size: 2,
            ..Default::default()
        }
    }

    fn gradient_image(seed: usize) -> ImageBuffer {
        ImageBuffer::from_fn(16, 16, 3, |y, x, c| ((y + x * (c + 1) + seed) % 16) as f32 / 15.0).unwrap()
    }

    #[test]
    fn shapes_follow_downsample_factor() {
        let ae = Autoencoder::new(tiny(), 0).unwrap();
        let mut rng = seeded_rng(0);
        let z = ae.encode(&gradient_image(0), EncodeMode::Mean, &mut rng).unwrap();
        assert_eq!((z.channels(), z.height(), z.width()), (4, 4, 4));
        let img = ae.decode(&z).unwrap();
        assert_eq!((img.height(), img.width(), img.channels()), (16, 16, 3));
    }

    #[test]
    fn mean_encoding_is_deterministic() {
        let ae = Autoencoder::new(tiny(), 0).unwrap();
        let img = gradient_image(1);
        let a = ae.encode(&img, EncodeMode::Mean, &mut seeded_rng(1)).unwrap();
        let b = ae.encode(&img, EncodeMode::Mean, &mut seeded_rng(2)).unwrap();
        let diff = (a.tensor() - b.tensor()).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn indivisible_and_wrong_channel_inputs_fail() {
        let ae = Autoencoder::new(tiny(), 0).unwrap();
        let mut rng = seeded_rng(0);
        let odd = ImageBuffer::filled(18, 16, 3, 0.5).unwrap();
        assert!(ae.encode(&odd, EncodeMode::Mean, &mut rng).is_err());
        let gray = ImageBuffer::filled(16, 16, 1, 0.5).unwrap();
        assert!(ae.encode(&gray, EncodeMode::Mean, &mut rng).is_err());
        let bad = LatentTensor::new(Tensor::zeros((3, 4, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert!(ae.decode(&bad).is_err());
    }

    #[test]
    fn zero_latent_decodes_to_a_valid_image() {
        let ae = Autoencoder::new(tiny(), 3).unwrap();
        let z = LatentTensor::new(Tensor::zeros((4, 4, 4), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let img = ae.decode(&z).unwrap();
        assert!(img.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn training_logs_every_step_and_calibrates() {
        let images: Vec<_> = (0..3).map(gradient_image).collect();
        let (mut ae, log) = train_autoencoder(&images, &tiny(), 5).unwrap();
        assert_eq!(log.losses.len(), 3);
        let scale = ae.latent_scale();
        let mut rng = seeded_rng(0);
        let z = ae.encode_batch(&images, EncodeMode::Mean, &mut rng).unwrap();
        let v: Vec<f64> = z.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap();
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((std - 1.0).abs() < 0.01, "calibrated std {std}");
        assert_eq!(ae.calibrate(&images).unwrap(), scale);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        assert!(matches!(
            train_autoencoder(&[], &tiny(), 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let images: Vec<_> = (0..2).map(gradient_image).collect();
        let (ae, _) = train_autoencoder(&images, &tiny(), 9).unwrap();
        let bytes = ae.to_checkpoint().unwrap().to_bytes().unwrap();
        let back = Autoencoder::from_checkpoint(Checkpoint::from_bytes(&bytes, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(back.fingerprint().unwrap(), ae.fingerprint().unwrap());
        assert_eq!(back.latent_scale(), ae.latent_scale());
        let mut rng = seeded_rng(0);
        let a = ae.encode(&images[0], EncodeMode::Mean, &mut rng).unwrap();
        let b = back.encode(&images[0], EncodeMode::Mean, &mut rng).unwrap();
        assert_eq!(
            a.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }
}
