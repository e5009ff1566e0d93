//! Sketch- and text-conditioned epsilon predictor and its training loop.
//!
//! The autoencoder is borrowed immutably. Photos are encoded once (posterior
//! mean, scaled) and the cached latents are reused for every step.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autoencoder::{Autoencoder, EncodeMode};
use crate::checkpoint::Checkpoint;
use crate::conditioning::{self, Variant, DEFAULT_T_AUG};
use crate::config::{self, KeyValues};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::params::{self, seeded_rng, ParamStore, SeededRng};
use crate::schedule::{q_sample_with, NoiseSchedule, ScheduleKind};
use crate::text::{build_vocab, tokenize, TextEncoder, TextEncoderConfig, Vocabulary};
use crate::unet::{UNet, UNetConfig};

const CHECKPOINT_KIND: &str = "diffusion";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub schedule: ScheduleKind,
    pub variant: Variant,
    pub p_uncond: f64,
    #[serde(rename = "T_aug")]
    pub t_aug: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            schedule: ScheduleKind::Linear,
            variant: Variant::Concat1,
            p_uncond: 0.1,
            t_aug: DEFAULT_T_AUG,
            learning_rate: 1e-4,
            steps: 3000,
            batch_size: 8,
            resolution: 64,
            seed: 0,
        }
    }
}

pub const CONFIG_KEYS: [&str; 10] = [
    "T",
    "schedule",
    "variant",
    "p_uncond",
    "T_aug",
    "learning_rate",
    "steps",
    "batch_size",
    "resolution",
    "seed",
];

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timesteps < 2 {
            return Err(Error::Config(format!("T must be >= 2, got {}", self.timesteps)));
        }
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond must lie in [0, 1), got {}", self.p_uncond)));
        }
        if self.t_aug == 0 || self.t_aug > self.timesteps {
            return Err(Error::Config(format!(
                "T_aug must lie in [1, T={}], got {}",
                self.timesteps, self.t_aug
            )));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.resolution == 0 {
            return Err(Error::Config(
                "learning_rate, batch_size and resolution must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_keys(&CONFIG_KEYS)?;
        let mut cfg = Self::default();
        config::set(kv, "T", &mut cfg.timesteps)?;
        config::set(kv, "schedule", &mut cfg.schedule)?;
        config::set(kv, "variant", &mut cfg.variant)?;
        config::set(kv, "p_uncond", &mut cfg.p_uncond)?;
        config::set(kv, "T_aug", &mut cfg.t_aug)?;
        config::set(kv, "learning_rate", &mut cfg.learning_rate)?;
        config::set(kv, "steps", &mut cfg.steps)?;
        config::set(kv, "batch_size", &mut cfg.batch_size)?;
        config::set(kv, "resolution", &mut cfg.resolution)?;
        config::set(kv, "seed", &mut cfg.seed)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_key_values(&KeyValues::load(path)?)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "T={}\nschedule={}\nvariant={}\np_uncond={}\nT_aug={}\nlearning_rate={}\nsteps={}\nbatch_size={}\nresolution={}\nseed={}\n",
            self.timesteps,
            self.schedule,
            self.variant,
            self.p_uncond,
            self.t_aug,
            self.learning_rate,
            self.steps,
            self.batch_size,
            self.resolution,
            self.seed
        )
    }
}

/// Network sizes; not part of the key=value config but echoed in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub text: TextEncoderConfig,
    pub max_vocab: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            widths: [32, 64, 64],
            emb_dim: 64,
            heads: 4,
            groups: 8,
            text: TextEncoderConfig::default(),
            max_vocab: 1024,
        }
    }
}

/// What the denoiser needs to know about the latent space it runs in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub channels: usize,
    pub downsample_factor: usize,
    pub vae_fingerprint: String,
}

impl LatentSpec {
    pub fn of(vae: &Autoencoder) -> Result<Self> {
        Ok(Self {
            channels: vae.config().latent_channels,
            downsample_factor: vae.config().downsample_factor,
            vae_fingerprint: vae.fingerprint()?,
        })
    }
}

/// Denoiser input with the condition channels already appended.
#[derive(Debug, Clone)]
pub struct DenoiserInputs {
    /// `(B, c_z + k, h, w)`.
    pub x: Tensor,
    pub t: Vec<usize>,
    /// `(B, L, d_txt)`.
    pub text: Tensor,
    pub aug_level: Option<Vec<usize>>,
}

impl DenoiserInputs {
    pub fn new(z_t: &Tensor, concat: &Tensor, t: Vec<usize>, text: Tensor, aug_level: Option<Vec<usize>>) -> Result<Self> {
        Ok(Self {
            x: Tensor::cat(&[z_t, concat], 1)?,
            t,
            text,
            aug_level,
        })
    }
}

/// Denoiser, text encoder and everything needed to sample from them.
pub struct DiffusionModel {
    config: DiffusionConfig,
    arch: Architecture,
    latent: LatentSpec,
    vocab: Vocabulary,
    store: ParamStore,
    unet: UNet,
    text: TextEncoder,
    schedule: NoiseSchedule,
    aug_schedule: NoiseSchedule,
    step: usize,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("config", &self.config)
            .field("arch", &self.arch)
            .field("latent", &self.latent)
            .field("step", &self.step)
            .finish()
    }
}

impl DiffusionModel {
    pub fn new(
        config: DiffusionConfig,
        arch: Architecture,
        latent: LatentSpec,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let store = ParamStore::new(config.seed);
        Self::with_store(config, arch, latent, vocab, store, 0)
    }

    fn with_store(
        config: DiffusionConfig,
        arch: Architecture,
        latent: LatentSpec,
        vocab: Vocabulary,
        store: ParamStore,
        step: usize,
    ) -> Result<Self> {
        config.validate()?;
        if config.resolution % (4 * latent.downsample_factor) != 0 {
            return Err(Error::Config(format!(
                "resolution {} must be divisible by 4 x downsample factor {}",
                config.resolution, latent.downsample_factor
            )));
        }
        let device = Device::Cpu;
        let vb = store.var_builder(DType::F32, &device);
        let unet_cfg = UNetConfig {
            latent_channels: latent.channels,
            cond_channels: config.variant.channels(),
            widths: arch.widths,
            emb_dim: arch.emb_dim,
            context_dim: arch.text.width,
            heads: arch.heads,
            groups: arch.groups,
            aug_embedding: config.variant.uses_aug_level(),
        };
        let unet = UNet::new(unet_cfg, vb.pp("unet"))?;
        let text = TextEncoder::new(arch.text, vocab.len(), vb.pp("text"))?;
        let schedule = NoiseSchedule::new(config.timesteps, config.schedule)?;
        let aug_schedule = schedule.truncated(config.t_aug)?;
        Ok(Self {
            config,
            arch,
            latent,
            vocab,
            store,
            unet,
            text,
            schedule,
            aug_schedule,
            step,
        })
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_spec(&self) -> &LatentSpec {
        &self.latent
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn aug_schedule(&self) -> &NoiseSchedule {
        &self.aug_schedule
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn device(&self) -> &Device {
        self.text.device()
    }

    /// Latent grid `(h, w)`.
    pub fn latent_hw(&self) -> (usize, usize) {
        let s = self.config.resolution / self.latent.downsample_factor;
        (s, s)
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<u32> {
        tokenize(prompt, &self.vocab, self.arch.text.seq_len)
    }

    /// `(L, d_txt)` embedding of `prompt`.
    pub fn embed_prompt(&self, prompt: &str) -> Result<Tensor> {
        self.text.embed(&self.tokenize(prompt))
    }

    pub fn null_embedding(&self) -> Tensor {
        self.text.null_embedding()
    }

    /// Predicted noise `(B, c_z, h, w)`.
    pub fn predict_eps(&self, inputs: &DenoiserInputs) -> Result<Tensor> {
        let b = inputs.x.dim(0)?;
        if let Some(&bad) = inputs.t.iter().find(|&&t| t == 0 || t > self.schedule.len()) {
            return Err(Error::InvalidInput(format!(
                "timestep {bad} outside [1, {}]",
                self.schedule.len()
            )));
        }
        let t: Vec<f64> = inputs.t.iter().map(|&t| t as f64).collect();
        let aug: Option<Vec<f64>> = match (&inputs.aug_level, self.variant().uses_aug_level()) {
            (Some(levels), true) => {
                if levels.len() != b || levels.iter().any(|&l| l >= self.aug_schedule.len()) {
                    return Err(Error::InvalidInput(format!(
                        "need {b} aug levels in [0, {})",
                        self.aug_schedule.len()
                    )));
                }
                Some(levels.iter().map(|&l| l as f64).collect())
            }
            (None, false) => None,
            (_, true) => return Err(Error::InvalidInput("concat3 needs an aug_level".into())),
            (_, false) => return Err(Error::InvalidInput("concat1 takes no aug_level".into())),
        };
        self.unet.forward(&inputs.x, &t, aug.as_deref(), &inputs.text)
    }

    fn check_resume(&self, config: &DiffusionConfig, latent: &LatentSpec) -> Result<()> {
        if config.variant != self.config.variant {
            return Err(Error::Incompatible(format!(
                "resumed checkpoint is {}, config asks for {}",
                self.config.variant, config.variant
            )));
        }
        if config.timesteps != self.config.timesteps
            || config.schedule != self.config.schedule
            || config.t_aug != self.config.t_aug
            || config.resolution != self.config.resolution
        {
            return Err(Error::Incompatible(
                "resumed checkpoint has a different schedule or resolution".into(),
            ));
        }
        if latent != &self.latent {
            return Err(Error::Incompatible(
                "resumed checkpoint was trained against a different autoencoder".into(),
            ));
        }
        Ok(())
    }

    /// Errors unless `vae` is the autoencoder this model was trained with.
    pub fn check_vae(&self, vae: &Autoencoder) -> Result<()> {
        let spec = LatentSpec::of(vae)?;
        if spec != self.latent {
            return Err(Error::Incompatible(format!(
                "autoencoder fingerprint {} does not match the one recorded in the diffusion checkpoint ({})",
                spec.vae_fingerprint, self.latent.vae_fingerprint
            )));
        }
        Ok(())
    }

    /// Checkpoint plus the serialized vocabulary it references.
    pub fn to_checkpoint(&self, vocab_file: &str) -> Result<Checkpoint> {
        let header = json!({
            "kind": CHECKPOINT_KIND,
            "config": self.config,
            "architecture": self.arch,
            "latent": self.latent,
            "step": self.step,
            "vocab": { "file": vocab_file, "checksum": self.vocab.checksum(), "size": self.vocab.len() },
        });
        Ok(Checkpoint::new(header, self.store.named_tensors()))
    }

    /// Writes the checkpoint and a `<name>.vocab` file next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let vocab_path = vocab_path_for(path);
        let vocab_file = vocab_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.vocab.save(&vocab_path)?;
        self.to_checkpoint(&vocab_file)?.save(path)
    }

    pub fn from_checkpoint(ck: Checkpoint, vocab: Vocabulary) -> Result<Self> {
        if ck.kind() != Some(CHECKPOINT_KIND) {
            return Err(Error::Checkpoint(format!(
                "expected a {CHECKPOINT_KIND} checkpoint, found {:?}",
                ck.kind()
            )));
        }
        let field = |name: &str| -> Result<serde_json::Value> {
            ck.header
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("header lacks `{name}`")))
        };
        let parse_err = |name: &str, e: serde_json::Error| Error::Checkpoint(format!("header `{name}`: {e}"));
        let config: DiffusionConfig = serde_json::from_value(field("config")?).map_err(|e| parse_err("config", e))?;
        let arch: Architecture =
            serde_json::from_value(field("architecture")?).map_err(|e| parse_err("architecture", e))?;
        let latent: LatentSpec = serde_json::from_value(field("latent")?).map_err(|e| parse_err("latent", e))?;
        let checksum = field("vocab")?["checksum"].as_str().unwrap_or_default().to_string();
        if checksum != vocab.checksum() {
            return Err(Error::Incompatible(
                "vocabulary does not match the checksum recorded in the checkpoint".into(),
            ));
        }
        let step = ck.header["step"].as_u64().unwrap_or(0) as usize;
        let count = ck.tensors.len();
        let store = ParamStore::from_tensors(ck.tensors)?;
        let model = Self::with_store(config, arch, latent, vocab, store, step)?;
        params::expect_count(&model.store, count, CHECKPOINT_KIND)?;
        Ok(model)
    }

    /// Loads a checkpoint and the vocabulary file named in its header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ck = Checkpoint::load(path, &Device::Cpu)?;
        let file = ck.header["vocab"]["file"]
            .as_str()
            .ok_or_else(|| Error::Checkpoint("header lacks the vocabulary reference".into()))?;
        let vocab_path = path.parent().unwrap_or(Path::new(".")).join(file);
        let vocab = Vocabulary::load(&vocab_path)?;
        Self::from_checkpoint(ck, vocab)
    }
}

pub fn vocab_path_for(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".vocab");
    ckpt.with_file_name(name)
}

/// Mean squared error between predicted and true noise.
pub fn diffusion_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if eps_hat.dims() != eps.dims() {
        return Err(Error::shape(eps.dims(), eps_hat.dims()));
    }
    Ok((eps_hat - eps)?.sqr()?.mean_all()?)
}

/// Precomputed per-example tensors: scaled latents, clean sketch channel and
/// token ids.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    /// `(N, c_z, h, w)`.
    pub z0: Tensor,
    /// `(N, 1, h, w)` in `[-1, 1]`.
    pub sketch: Tensor,
    pub ids: Vec<Vec<u32>>,
}

impl TrainingSet {
    pub fn prepare(examples: &[Example], vae: &Autoencoder, model: &DiffusionModel) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let res = model.config.resolution;
        if let Some(bad) = examples.iter().find(|e| e.photo.height() != res || e.photo.width() != res) {
            return Err(Error::InvalidInput(format!(
                "example photo is {}x{}, config resolution is {res}",
                bad.photo.height(),
                bad.photo.width()
            )));
        }
        let mut rng = seeded_rng(0);
        let mut z = Vec::new();
        for chunk in examples.chunks(8) {
            let photos: Vec<_> = chunk.iter().map(|e| e.photo.clone()).collect();
            z.push(vae.encode_batch(&photos, EncodeMode::Mean, &mut rng)?);
        }
        let hw = model.latent_hw();
        let sketch = examples
            .iter()
            .map(|e| conditioning::make_concat1(&e.edge, hw, model.device()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            z0: Tensor::cat(&z, 0)?,
            sketch: Tensor::stack(&sketch, 0)?,
            ids: examples.iter().map(|e| model.tokenize(&e.caption)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Options for training that sit outside the key=value config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub arch: Architecture,
    /// Probability of zeroing the sketch channels for an item.
    pub p_drop_sketch: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            p_drop_sketch: 0.0,
        }
    }
}

/// One sampled minibatch and the noise the model must recover.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub inputs: DenoiserInputs,
    pub eps: Tensor,
    /// Per item: did the text embedding get replaced by the null condition.
    pub null_text: Vec<bool>,
    pub dropped_sketch: Vec<bool>,
}

/// Draws timesteps, noise, augmentation levels and null-condition flags for
/// the items `indices` of `data`.
pub fn sample_batch(
    model: &DiffusionModel,
    data: &TrainingSet,
    indices: &[usize],
    p_drop_sketch: f64,
    rng: &mut SeededRng,
) -> Result<TrainingBatch> {
    if indices.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let dev = model.device().clone();
    let idx = Tensor::from_vec(indices.iter().map(|&i| i as u32).collect::<Vec<_>>(), indices.len(), &dev)?;
    let z0 = data.z0.index_select(&idx, 0)?;
    let clean = data.sketch.index_select(&idx, 0)?;
    let t_max = model.schedule.len();

    let mut t = Vec::with_capacity(indices.len());
    let mut null_text = Vec::with_capacity(indices.len());
    let mut z_t = Vec::with_capacity(indices.len());
    let mut eps_all = Vec::with_capacity(indices.len());
    let mut concat = Vec::with_capacity(indices.len());
    let mut dropped = Vec::with_capacity(indices.len());
    let mut aug = Vec::new();
    for (b, _) in indices.iter().enumerate() {
        let ti = rng.random_range(1..=t_max);
        let eps = params::randn(rng, z0.get(b)?.shape(), &dev)?;
        z_t.push(q_sample_with(&z0.get(b)?, model.schedule.alpha_bar(ti), &eps)?);
        eps_all.push(eps);
        t.push(ti);
        null_text.push(rng.random::<f64>() < model.config.p_uncond);

        let sketch = clean.get(b)?;
        let c = match model.variant() {
            Variant::Concat1 => sketch,
            Variant::Concat3 => {
                let level = rng.random_range(0..model.aug_schedule.len());
                aug.push(level);
                let rep = Tensor::cat(&[&sketch, &sketch, &sketch], 0)?;
                if level == 0 {
                    rep
                } else {
                    let noise = params::randn(rng, rep.shape(), &dev)?;
                    q_sample_with(&rep, model.aug_schedule.alpha_bar(level), &noise)?
                }
            }
        };
        let (c, drop) = if p_drop_sketch > 0.0 {
            conditioning::drop_sketch(&c, p_drop_sketch, rng)?
        } else {
            (c, false)
        };
        dropped.push(drop);
        concat.push(c);
    }

    let ids: Vec<Vec<u32>> = indices.iter().map(|&i| data.ids[i].clone()).collect();
    let embedded = model.text.embed_batch(&ids)?;
    let null = model.text.null_embedding();
    let rows = null_text
        .iter()
        .enumerate()
        .map(|(b, &is_null)| if is_null { Ok(null.clone()) } else { embedded.get(b) })
        .collect::<candle_core::Result<Vec<_>>>()?;

    let inputs = DenoiserInputs::new(
        &Tensor::stack(&z_t, 0)?,
        &Tensor::stack(&concat, 0)?,
        t,
        Tensor::stack(&rows, 0)?,
        model.variant().uses_aug_level().then_some(aug),
    )?;
    Ok(TrainingBatch {
        inputs,
        eps: Tensor::stack(&eps_all, 0)?,
        null_text,
        dropped_sketch: dropped,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DiffusionLog {
    pub losses: Vec<f64>,
    /// Items whose text was replaced by the null condition.
    pub null_items: usize,
    pub sketch_drops: usize,
    pub items: usize,
}

impl DiffusionLog {
    pub fn null_fraction(&self) -> f64 {
        self.null_items as f64 / self.items.max(1) as f64
    }

    /// `step,loss` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }
}

/// Mutable training state: model, optimizer and data stream.
pub struct Trainer {
    model: DiffusionModel,
    data: TrainingSet,
    opt: AdamW,
    rng: SeededRng,
    order: Vec<usize>,
    options: TrainOptions,
    log: DiffusionLog,
}

impl Trainer {
    pub fn new(model: DiffusionModel, data: TrainingSet, options: TrainOptions) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let opt = AdamW::new(
            model.store.vars(),
            ParamsAdamW {
                lr: model.config.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng = seeded_rng(model.config.seed.wrapping_add(0x5EED).wrapping_add(model.step as u64));
        Ok(Self {
            model,
            data,
            opt,
            rng,
            order: Vec::new(),
            options,
            log: DiffusionLog::default(),
        })
    }

    pub fn model(&self) -> &DiffusionModel {
        &self.model
    }

    pub fn log(&self) -> &DiffusionLog {
        &self.log
    }

    fn next_indices(&mut self) -> Vec<usize> {
        let batch = self.model.config.batch_size.min(self.data.len());
        if self.order.len() < batch {
            let mut epoch: Vec<usize> = (0..self.data.len()).collect();
            epoch.shuffle(&mut self.rng);
            self.order.extend(epoch);
        }
        self.order.drain(..batch).collect()
    }

    /// One optimizer step; returns the loss before the update.
    pub fn step(&mut self) -> Result<f64> {
        let indices = self.next_indices();
        let batch = sample_batch(
            &self.model,
            &self.data,
            &indices,
            self.options.p_drop_sketch,
            &mut self.rng,
        )?;
        let loss = diffusion_loss(&self.model.predict_eps(&batch.inputs)?, &batch.eps)?;
        self.opt.backward_step(&loss)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            return Err(Error::InvalidInput(format!(
                "diffusion loss diverged at step {}",
                self.model.step
            )));
        }
        self.model.step += 1;
        self.log.losses.push(value);
        self.log.items += indices.len();
        self.log.null_items += batch.null_text.iter().filter(|&&n| n).count();
        self.log.sketch_drops += batch.dropped_sketch.iter().filter(|&&d| d).count();
        Ok(value)
    }

    pub fn finish(self) -> (DiffusionModel, DiffusionLog) {
        (self.model, self.log)
    }
}

/// Trains for `config.steps` steps from scratch, or continues `resume`.
pub fn train_diffusion(
    examples: &[Example],
    config: &DiffusionConfig,
    vae: &Autoencoder,
    options: &TrainOptions,
    resume: Option<DiffusionModel>,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(DiffusionModel, DiffusionLog)> {
    config.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let latent = LatentSpec::of(vae)?;
    let model = match resume {
        Some(m) => {
            m.check_resume(config, &latent)?;
            let mut m = m;
            m.config.learning_rate = config.learning_rate;
            m.config.batch_size = config.batch_size;
            m.config.steps = config.steps;
            m.config.p_uncond = config.p_uncond;
            m
        }
        None => {
            let captions: Vec<&str> = examples.iter().map(|e| e.caption.as_str()).collect();
            let vocab = build_vocab(&captions, options.arch.max_vocab)?;
            DiffusionModel::new(config.clone(), options.arch, latent, vocab)?
        }
    };
    let data = TrainingSet::prepare(examples, vae, &model)?;
    let mut trainer = Trainer::new(model, data, *options)?;
    for i in 0..config.steps {
        let loss = trainer.step()?;
        on_step(i, loss);
    }
    Ok(trainer.finish())
}

/// Mean of the first and last `window` entries.
pub fn smoothed_ends(losses: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(losses.len() / 2);
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&losses[..w]), mean(&losses[losses.len() - w..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_key_values() {
        let cfg = DiffusionConfig {
            variant: Variant::Concat3,
            seed: 9,
            p_uncond: 0.2,
            ..Default::default()
        };
        let kv = KeyValues::parse(&cfg.to_key_values()).unwrap();
        assert_eq!(DiffusionConfig::from_key_values(&kv).unwrap(), cfg);
        assert!(DiffusionConfig::from_key_values(&KeyValues::parse("lr=1").unwrap()).is_err());
        assert!(DiffusionConfig::from_key_values(&KeyValues::parse("p_uncond=1").unwrap()).is_err());
    }

    #[test]
    fn loss_of_exact_prediction_is_zero() {
        let eps = Tensor::new(&[[0.3f32, -1.2], [2.0, 0.0]], &Device::Cpu).unwrap();
        let l = diffusion_loss(&eps, &eps).unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(l, 0.0);
    }
}
