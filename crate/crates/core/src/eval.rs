//! Reconstruction evaluation and the style-prefix sweep.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::data::{self, DatasetManifest, Example};
use crate::diffusion::DiffusionModel;
use crate::edge::EdgeParams;
use crate::error::{Error, Result};
use crate::image::{EdgeMap, ImageBuffer};
use crate::sampler::{self, SamplerConfig};

/// The nine style prefixes of the sweep gallery.
pub const DEFAULT_STYLE_PREFIXES: [&str; 9] = [
    "an anime scene of",
    "a watercolor painting of",
    "an ukiyo-e art of",
    "a black and white photograph of",
    "a fresco painting of",
    "a graffiti of",
    "an oil painting of",
    "a pop art of",
    "an abstract art of",
];

/// Default prefix for photographic output.
pub const PHOTO_PREFIX: &str = "a color photograph of";

pub const DEFAULT_REPORT_RESOLUTION: usize = 256;

#[derive(Clone)]
pub enum PerceptualBackend {
    /// Pixel MSE averaged with channel-normalized encoder feature distances.
    Fallback(Arc<Autoencoder>),
    /// `program [args…] pairs.tsv scores.csv`; the TSV lists one
    /// `path_a<TAB>path_b` pair per line and the scorer writes
    /// `index,distance` rows.
    External { program: String, args: Vec<String> },
}

impl std::fmt::Debug for PerceptualBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Fallback(_) => f.write_str("Fallback"),
            Self::External { program, args } => f.debug_struct("External").field("program", program).field("args", args).finish(),
        }
    }
}

impl PerceptualBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Fallback(_) => "fallback",
            Self::External { .. } => "external",
        }
    }

    /// Parses a whitespace-separated command line.
    pub fn external(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::Config("empty external scorer command".into()))?;
        Ok(Self::External {
            program,
            args: parts.collect(),
        })
    }

    pub fn distance(&self, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
        Ok(self.distances(&[(a.clone(), b.clone())])?[0])
    }

    pub fn distances(&self, pairs: &[(ImageBuffer, ImageBuffer)]) -> Result<Vec<f64>> {
        for (a, b) in pairs {
            check_pair(a, b)?;
        }
        match self {
            Self::Fallback(ae) => pairs.iter().map(|(a, b)| fallback_distance(ae, a, b)).collect(),
            Self::External { program, args } => external_distances(program, args, pairs),
        }
    }
}

fn check_pair(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    let dims = |i: &ImageBuffer| (i.height(), i.width(), i.channels());
    if dims(a) != dims(b) {
        return Err(Error::shape(dims(a), dims(b)));
    }
    if a.channels() != 3 {
        return Err(Error::InvalidInput("perceptual distance needs RGB images".into()));
    }
    Ok(())
}

/// Unit-length feature vectors at every spatial position.
fn channel_normalize(t: &Tensor) -> candle_core::Result<Tensor> {
    let norm = (t.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    t.broadcast_div(&norm)
}

fn fallback_distance(ae: &Autoencoder, a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    if a.data() == b.data() {
        return Ok(0.0);
    }
    let pixel = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    let fa = ae.encoder_features(a)?;
    let fb = ae.encoder_features(b)?;
    let mut total = pixel;
    for (x, y) in fa.iter().zip(&fb) {
        let d = (channel_normalize(x)? - channel_normalize(y)?)?
            .sqr()?
            .sum_keepdim(1)?
            .mean_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_scalar::<f64>()?;
        total += d;
    }
    Ok(total / (fa.len() + 1) as f64)
}

fn external_distances(program: &str, args: &[String], pairs: &[(ImageBuffer, ImageBuffer)]) -> Result<Vec<f64>> {
    let dir = std::env::temp_dir().join(format!(
        "s2p-score-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let result = (|| {
        let mut tsv = String::new();
        for (i, (a, b)) in pairs.iter().enumerate() {
            let pa = dir.join(format!("{i:05}_a.png"));
            let pb = dir.join(format!("{i:05}_b.png"));
            a.save_png(&pa)?;
            b.save_png(&pb)?;
            tsv.push_str(&format!("{}\t{}\n", pa.display(), pb.display()));
        }
        let pairs_path = dir.join("pairs.tsv");
        let scores_path = dir.join("scores.csv");
        std::fs::write(&pairs_path, tsv).map_err(|e| Error::io(&pairs_path, e))?;
        let status = Command::new(program)
            .args(args)
            .arg(&pairs_path)
            .arg(&scores_path)
            .status()
            .map_err(|e| Error::Backend(format!("cannot run scorer `{program}`: {e}")))?;
        if !status.success() {
            return Err(Error::Backend(format!("scorer `{program}` exited with {status}")));
        }
        read_scores(&scores_path, pairs.len())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}

fn read_scores(path: &Path, n: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Backend(format!("scorer wrote no {}: {e}", path.display())))?;
    let mut out = vec![None; n];
    for (ln, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::Backend(format!("scores line {}: expected `index,distance`", ln + 1));
        let (i, d) = line.split_once(',').ok_or_else(bad)?;
        let i: usize = i.trim().parse().map_err(|_| bad())?;
        let d: f64 = d.trim().parse().map_err(|_| bad())?;
        if i >= n || !(d >= 0.0) {
            return Err(Error::Backend(format!("scores line {}: index or distance out of range", ln + 1)));
        }
        out[i] = Some(d);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| Error::Backend(format!("scorer gave no distance for pair {i}"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub path: PathBuf,
    pub caption: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub mean_distance: f64,
    pub items: Vec<ItemScore>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub dataset: String,
    /// Working resolution of the model (edges and photos are prepared here).
    pub resolution: usize,
    pub report_resolution: usize,
    pub edge_params: EdgeParams,
    pub config: serde_json::Value,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            dataset: String::new(),
            resolution: 64,
            report_resolution: DEFAULT_REPORT_RESOLUTION,
            edge_params: EdgeParams::default(),
            config: serde_json::Value::Null,
        }
    }
}

/// For each entry: prepare photo and edges, generate from edges + caption,
/// resize generated and source photo to the report resolution, score.
pub fn evaluate_reconstruction(
    manifest: &DatasetManifest,
    options: &EvalOptions,
    backend: &PerceptualBackend,
    mut generate: impl FnMut(&Example) -> Result<ImageBuffer>,
) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let r = options.report_resolution;
    let mut pairs = Vec::with_capacity(manifest.len());
    for entry in &manifest.entries {
        let ex = data::prepare_example(entry, options.resolution, &options.edge_params)?;
        let generated = generate(&ex)?;
        pairs.push((generated.to_rgb().resize_bilinear(r, r)?, ex.photo.resize_bilinear(r, r)?));
    }
    let distances = backend.distances(&pairs)?;
    let items: Vec<ItemScore> = manifest
        .entries
        .iter()
        .zip(&distances)
        .map(|(e, &d)| ItemScore {
            path: e.path.clone(),
            caption: e.caption.clone(),
            distance: d,
        })
        .collect();
    let mean_distance = distances.iter().sum::<f64>() / distances.len() as f64;
    Ok(EvalReport {
        dataset: options.dataset.clone(),
        n: items.len(),
        mean_distance,
        items,
        config: options.config.clone(),
    })
}

/// [`evaluate_reconstruction`] driven by the trained model and sampler.
pub fn evaluate_model(
    model: &DiffusionModel,
    vae: &Autoencoder,
    manifest: &DatasetManifest,
    cfg: &SamplerConfig,
    backend: &PerceptualBackend,
    options: &EvalOptions,
) -> Result<EvalReport> {
    model.check_vae(vae)?;
    let mut options = options.clone();
    options.resolution = model.config().resolution;
    if options.config.is_null() {
        options.config = serde_json::json!({
            "sampler": cfg,
            "backend": backend.kind(),
            "report_resolution": options.report_resolution,
            "diffusion": model.config(),
        });
    }
    evaluate_reconstruction(manifest, &options, backend, |ex| {
        sampler::sample(model, vae, &ex.edge, &ex.caption, cfg)
    })
}

/// One sample per prefix, all with the same seed; prompt is
/// `"{prefix} {base_caption}"`.
pub fn style_sweep<S: AsRef<str>>(
    model: &DiffusionModel,
    vae: &Autoencoder,
    sketch: &EdgeMap,
    prefixes: &[S],
    base_caption: &str,
    cfg: &SamplerConfig,
) -> Result<Vec<(String, ImageBuffer)>> {
    style_sweep_with(prefixes, base_caption, |prompt| sampler::sample(model, vae, sketch, prompt, cfg))
}

pub fn style_sweep_with<S: AsRef<str>>(
    prefixes: &[S],
    base_caption: &str,
    mut generate: impl FnMut(&str) -> Result<ImageBuffer>,
) -> Result<Vec<(String, ImageBuffer)>> {
    if prefixes.is_empty() {
        return Err(Error::InvalidInput("style sweep needs at least one prefix".into()));
    }
    prefixes
        .iter()
        .map(|p| {
            let prompt = compose_prompt(p.as_ref(), base_caption);
            generate(&prompt).map(|img| (p.as_ref().to_string(), img))
        })
        .collect()
}

pub fn compose_prompt(prefix: &str, base: &str) -> String {
    match (prefix.trim(), base.trim()) {
        ("", b) => b.to_string(),
        (p, "") => p.to_string(),
        (p, b) => format!("{p} {b}"),
    }
}
