//! The `s2p` command line: data preparation, training, sampling, evaluation
//! and the HTTP service.

pub mod service;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use s2p_core::autoencoder::{self, Autoencoder, AutoencoderConfig};
use s2p_core::config::KeyValues;
use s2p_core::data::{self, CaptionSources, DatasetManifest, Example, Split};
use s2p_core::diffusion::{self, Architecture, DiffusionConfig, DiffusionModel, TrainOptions};
use s2p_core::edge::{self, EdgeParams};
use s2p_core::eval::{self, EvalOptions, PerceptualBackend, DEFAULT_STYLE_PREFIXES};
use s2p_core::image::{EdgeMap, ImageBuffer};
use s2p_core::sampler::{self, Method, SamplerConfig};
use s2p_core::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "s2p", version, about = "Sketch-to-photo latent diffusion")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Map a directory of images to edge PNGs.
    Standardize(StandardizeArgs),
    /// Build a JSONL manifest from a photo directory.
    Ingest(IngestArgs),
    /// Train the latent autoencoder.
    TrainVae(TrainVaeArgs),
    /// Train the sketch- and text-conditioned denoiser.
    TrainDiffusion(TrainDiffusionArgs),
    /// Generate one image from a sketch and a prompt.
    Sample(SampleArgs),
    /// Score reconstructions of a manifest against its photos.
    Eval(EvalArgs),
    /// Render one sketch under several style prefixes.
    Sweep(SweepArgs),
    /// Run the HTTP generation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct EdgeArgs {
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    low: f64,
    #[arg(long, default_value_t = 0.2)]
    high: f64,
    #[arg(long)]
    binarize: bool,
    /// Skip closing and thinning of candidate edges.
    #[arg(long)]
    no_thin: bool,
}

impl EdgeArgs {
    fn params(&self) -> EdgeParams {
        EdgeParams {
            blur_sigma: self.sigma,
            low_threshold: self.low,
            high_threshold: self.high,
            binarize: self.binarize,
            thin_lines: !self.no_thin,
        }
    }
}

#[derive(Debug, Args)]
struct StandardizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    edges: EdgeArgs,
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    photos: PathBuf,
    /// `sidecar`, a `.tsv` file, or a template such as
    /// "a color photograph of a {dirname}". Sidecar files always win.
    #[arg(long, default_value = "sidecar")]
    captions: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0.0)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainVaeArgs {
    /// Photo directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-step loss CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainDiffusionArgs {
    /// Photo directory (sidecar captions) or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vae: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue training this diffusion checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Probability of blanking the sketch channels per item.
    #[arg(long, default_value_t = 0.0)]
    drop_sketch: f64,
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[command(flatten)]
    edges: EdgeArgs,
}

#[derive(Debug, Args)]
struct SamplerArgs {
    #[arg(long, default_value_t = 7.5)]
    scale: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ddim")]
    method: Method,
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    #[arg(long, default_value_t = 0)]
    aug_level: usize,
    /// Blank the sketch in the unconditional branch as well as the text.
    #[arg(long)]
    null_sketch: bool,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.scale,
            method: self.method,
            eta: self.eta,
            seed: self.seed,
            aug_level: self.aug_level,
            null_sketch: self.null_sketch,
        }
    }
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long, env = "S2P_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "S2P_VAE")]
    vae: PathBuf,
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long, default_value = "")]
    prompt: String,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
    /// Treat the sketch as an edge map already; skip standardization.
    #[arg(long)]
    edges_only: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, env = "S2P_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "S2P_VAE")]
    vae: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "fallback")]
    backend: String,
    /// Scorer command for `--backend external`.
    #[arg(long)]
    scorer: Option<String>,
    /// Which entries to score: train, val or all.
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long, default_value_t = eval::DEFAULT_REPORT_RESOLUTION)]
    report_resolution: usize,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, env = "S2P_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "S2P_VAE")]
    vae: PathBuf,
    #[arg(long)]
    sketch: PathBuf,
    #[arg(long, default_value = "")]
    base_caption: String,
    /// Repeatable; defaults to the nine gallery styles.
    #[arg(long = "prefix")]
    prefixes: Vec<String>,
    #[command(flatten)]
    sampler: SamplerArgs,
    #[arg(long)]
    edges_only: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "S2P_CKPT")]
    ckpt: PathBuf,
    #[arg(long, env = "S2P_VAE")]
    vae: PathBuf,
    #[arg(long, env = "S2P_BIND", default_value = "127.0.0.1:8080")]
    bind: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

/// Parses `argv` and runs the command. Exit codes: 0 success, 1 usage
/// error, 2 runtime error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Standardize(a) => standardize(a),
        Command::Ingest(a) => ingest(a),
        Command::TrainVae(a) => train_vae(a),
        Command::TrainDiffusion(a) => train_diffusion(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => evaluate(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
    }
}

fn standardize(a: StandardizeArgs) -> Result<()> {
    let report = edge::batch_standardize(&a.input, &a.out, &a.edges.params())?;
    for (path, reason) in &report.failures {
        eprintln!("skipped {}: {reason}", path.display());
    }
    println!(
        "{}",
        json!({ "count": report.count, "failures": report.failures.len() })
    );
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let sources = CaptionSources::from_spec(&a.captions)?;
    let manifest = data::ingest_corpus(&a.photos, &sources, a.resolution)?;
    let manifest = data::split_manifest(&manifest, a.val_fraction, a.seed)?;
    manifest.save(&a.out)?;
    println!(
        "{}",
        json!({
            "entries": manifest.len(),
            "val": manifest.split(Split::Val).count(),
            "out": a.out.display().to_string(),
        })
    );
    Ok(())
}

/// A manifest file, or a directory ingested with sidecar captions.
fn load_data(path: &Path, resolution: usize) -> Result<DatasetManifest> {
    if path.is_dir() {
        data::ingest_corpus(path, &CaptionSources::sidecar_only(), resolution)
    } else {
        DatasetManifest::load(path)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn train_vae(a: TrainVaeArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => AutoencoderConfig::from_key_values(&KeyValues::load(p)?)?,
        None => AutoencoderConfig::default(),
    };
    let manifest = load_data(&a.data, a.resolution)?;
    let images = manifest
        .split(Split::Train)
        .map(|e| data::prepare_photo(&ImageBuffer::load_png(&e.path)?, a.resolution))
        .collect::<Result<Vec<_>>>()?;
    let (ae, log) = autoencoder::train_autoencoder_with(&images, &config, a.seed, |step, loss| {
        if step % 100 == 0 {
            eprintln!("{}", json!({ "step": step, "loss": loss }));
        }
    })?;
    ae.save(&a.out)?;
    if let Some(p) = &a.loss_log {
        let mut csv = String::from("step,loss\n");
        for (i, l) in log.losses.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        write_file(p, &csv)?;
    }
    println!(
        "{}",
        json!({
            "images": images.len(),
            "steps": config.steps,
            "final_loss": log.losses.last(),
            "latent_scale": ae.latent_scale(),
        })
    );
    Ok(())
}

fn train_diffusion(a: TrainDiffusionArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => DiffusionConfig::load(p)?,
        None => DiffusionConfig::default(),
    };
    let vae = Autoencoder::load(&a.vae)?;
    let resume = a.resume.as_ref().map(DiffusionModel::load).transpose()?;
    let manifest = load_data(&a.data, config.resolution)?;
    let params = a.edges.params();
    let examples = manifest
        .split(Split::Train)
        .map(|e| data::prepare_example(e, config.resolution, &params))
        .collect::<Result<Vec<Example>>>()?;
    let mut arch = Architecture::default();
    if let Some(w) = &a.widths {
        arch.widths = w
            .as_slice()
            .try_into()
            .map_err(|_| Error::Config(format!("--widths takes three values, got {}", w.len())))?;
    }
    let options = TrainOptions {
        arch,
        p_drop_sketch: a.drop_sketch,
    };
    let (model, log) = diffusion::train_diffusion(&examples, &config, &vae, &options, resume, |step, loss| {
        if step % 100 == 0 {
            eprintln!("{}", json!({ "step": step, "loss": loss }));
        }
    })?;
    model.save(&a.out)?;
    if let Some(p) = &a.loss_log {
        write_file(p, &log.to_csv())?;
    }
    println!(
        "{}",
        json!({
            "examples": examples.len(),
            "steps": config.steps,
            "variant": config.variant.to_string(),
            "final_loss": log.losses.last(),
            "null_fraction": log.null_fraction(),
        })
    );
    Ok(())
}

fn load_models(ckpt: &Path, vae: &Path) -> Result<(DiffusionModel, Autoencoder)> {
    let model = DiffusionModel::load(ckpt)?;
    let vae = Autoencoder::load(vae)?;
    model.check_vae(&vae)?;
    Ok((model, vae))
}

fn load_sketch(path: &Path, resolution: usize, edges_only: bool) -> Result<EdgeMap> {
    let img = ImageBuffer::load_png(path)?;
    service::prepare_sketch(&img, resolution, !edges_only, &EdgeParams::default())
}

fn sample(a: SampleArgs) -> Result<()> {
    let (model, vae) = load_models(&a.ckpt, &a.vae)?;
    let sketch = load_sketch(&a.sketch, model.config().resolution, a.edges_only)?;
    let img = sampler::sample(&model, &vae, &sketch, &a.prompt, &a.sampler.config())?;
    img.save_png(&a.out)
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let (model, vae) = load_models(&a.ckpt, &a.vae)?;
    let backend = match a.backend.as_str() {
        "fallback" => PerceptualBackend::Fallback(Arc::new(Autoencoder::load(&a.vae)?)),
        "external" => PerceptualBackend::external(
            a.scorer
                .as_deref()
                .ok_or_else(|| Error::Config("--backend external needs --scorer".into()))?,
        )?,
        other => return Err(Error::Config(format!("unknown backend {other:?}"))),
    };
    let mut manifest = DatasetManifest::load(&a.manifest)?;
    match a.split.as_str() {
        "all" => {}
        "train" => manifest.entries.retain(|e| e.split == Split::Train),
        "val" => manifest.entries.retain(|e| e.split == Split::Val),
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    }
    let options = EvalOptions {
        dataset: a.manifest.display().to_string(),
        report_resolution: a.report_resolution,
        ..Default::default()
    };
    let report = eval::evaluate_model(&model, &vae, &manifest, &a.sampler.config(), &backend, &options)?;
    write_file(&a.out, &report.to_json())?;
    println!("{}", json!({ "n": report.n, "mean_distance": report.mean_distance }));
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let (model, vae) = load_models(&a.ckpt, &a.vae)?;
    let sketch = load_sketch(&a.sketch, model.config().resolution, a.edges_only)?;
    let prefixes: Vec<String> = if a.prefixes.is_empty() {
        DEFAULT_STYLE_PREFIXES.iter().map(|s| s.to_string()).collect()
    } else {
        a.prefixes.clone()
    };
    let results = eval::style_sweep(&model, &vae, &sketch, &prefixes, &a.base_caption, &a.sampler.config())?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut index = Vec::new();
    for (i, (prefix, img)) in results.iter().enumerate() {
        let slug: String = prefix
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let name = format!("{i:02}_{slug}.png");
        img.save_png(a.out_dir.join(&name))?;
        index.push(json!({ "prefix": prefix, "prompt": eval::compose_prompt(prefix, &a.base_caption), "file": name }));
    }
    write_file(
        &a.out_dir.join("index.json"),
        &serde_json::to_string_pretty(&index).expect("index serializes"),
    )?;
    println!("{}", json!({ "images": results.len() }));
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let (model, vae) = load_models(&a.ckpt, &a.vae)?;
    let state = Arc::new(service::AppState::new(model, vae, a.workers)?);
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Backend(format!("cannot start runtime: {e}")))?;
    runtime
        .block_on(service::serve(state, &a.bind))
        .map_err(|e| Error::Backend(format!("server on {}: {e}", a.bind)))
}
