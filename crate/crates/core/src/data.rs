//! Corpus ingestion, manifests, example preparation and splits.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::edge::{self, EdgeParams};
use crate::error::{Error, Result};
use crate::image::{EdgeMap, ImageBuffer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub caption: String,
    pub split: Split,
    /// Hex SHA-256 of the file bytes at ingest time.
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub resolution: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    path: PathBuf,
    caption: String,
    split: Split,
    checksum: String,
    resolution: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// JSON lines, one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let line = ManifestLine {
                path: e.path.clone(),
                caption: e.caption.clone(),
                split: e.split,
                checksum: e.checksum.clone(),
                resolution: self.resolution,
            };
            out.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut resolution = None;
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ManifestLine = serde_json::from_str(line)
                .map_err(|e| Error::InvalidInput(format!("manifest line {}: {e}", n + 1)))?;
            match resolution {
                None => resolution = Some(parsed.resolution),
                Some(r) if r != parsed.resolution => {
                    return Err(Error::InvalidInput(format!(
                        "manifest line {}: resolution {} disagrees with {r}",
                        n + 1,
                        parsed.resolution
                    )))
                }
                _ => {}
            }
            entries.push(ManifestEntry {
                path: parsed.path,
                caption: parsed.caption,
                split: parsed.split,
                checksum: parsed.checksum,
            });
        }
        let resolution = resolution.ok_or(Error::EmptyDataset)?;
        Ok(Self { entries, resolution })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Where captions come from. Per image the first hit wins:
/// `<stem>.txt` sidecar, then a TSV row, then the template.
#[derive(Debug, Clone, Default)]
pub struct CaptionSources {
    /// `stem → caption`, from a TSV of `name<TAB>caption` rows.
    pub table: HashMap<String, String>,
    /// Fallback caption; `{dirname}` and `{stem}` are substituted.
    pub template: Option<String>,
}

impl CaptionSources {
    pub fn sidecar_only() -> Self {
        Self::default()
    }

    pub fn with_template(template: impl Into<String>) -> Self {
        Self {
            template: Some(template.into()),
            ..Self::default()
        }
    }

    /// Reads a TSV; the first column may be a file name or a stem.
    pub fn load_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table = HashMap::new();
        for line in text.lines() {
            let Some((name, caption)) = line.split_once('\t') else {
                continue;
            };
            let stem = Path::new(name.trim())
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            table.insert(stem, caption.trim().to_string());
        }
        Ok(Self {
            table,
            template: None,
        })
    }

    /// Parses a CLI `--captions` value: `sidecar`, a `.tsv` path, or a template.
    pub fn from_spec(spec: &str) -> Result<Self> {
        if spec == "sidecar" {
            Ok(Self::sidecar_only())
        } else if spec.to_ascii_lowercase().ends_with(".tsv") {
            Self::load_tsv(spec)
        } else {
            Ok(Self::with_template(spec))
        }
    }

    fn resolve(&self, image: &Path) -> Result<String> {
        let sidecar = image.with_extension("txt");
        if sidecar.is_file() {
            let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
            return Ok(text.trim().to_string());
        }
        let stem = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(c) = self.table.get(&stem) {
            return Ok(c.clone());
        }
        let dirname = image
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(self
            .template
            .as_deref()
            .map(|t| t.replace("{dirname}", &dirname).replace("{stem}", &stem))
            .unwrap_or_default())
    }
}

pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::params::hex(&Sha256::digest(&bytes)))
}

/// Walks `photos_dir` recursively (sorted) and builds a manifest with every
/// decodable image, all in the train split.
pub fn ingest_corpus(
    photos_dir: impl AsRef<Path>,
    captions: &CaptionSources,
    resolution: usize,
) -> Result<DatasetManifest> {
    let dir = photos_dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    if resolution == 0 {
        return Err(Error::InvalidInput("resolution must be positive".into()));
    }
    let mut entries = Vec::new();
    for item in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let item = item.map_err(|e| Error::InvalidInput(format!("walking {}: {e}", dir.display())))?;
        let path = item.path();
        if !item.file_type().is_file() || !edge::has_image_extension(path) {
            continue;
        }
        if image::open(path).is_err() {
            continue;
        }
        entries.push(ManifestEntry {
            path: path.to_path_buf(),
            caption: captions.resolve(path)?,
            split: Split::Train,
            checksum: file_checksum(path)?,
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(DatasetManifest { entries, resolution })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub photo: ImageBuffer,
    pub edge: EdgeMap,
    pub caption: String,
}

/// Center crop, bilinear resize to `resolution`², RGB, and edges of the
/// resized photo.
pub fn prepare_example(entry: &ManifestEntry, resolution: usize, params: &EdgeParams) -> Result<Example> {
    prepare_example_with(entry, resolution, params, false)
}

pub fn prepare_example_with(
    entry: &ManifestEntry,
    resolution: usize,
    params: &EdgeParams,
    flip: bool,
) -> Result<Example> {
    let img = ImageBuffer::load_png(&entry.path)?;
    let mut photo = prepare_photo(&img, resolution)?;
    if flip {
        photo = photo.flip_horizontal();
    }
    let edge = edge::standardize(&photo, params)?;
    Ok(Example {
        photo,
        edge,
        caption: entry.caption.clone(),
    })
}

pub fn prepare_photo(img: &ImageBuffer, resolution: usize) -> Result<ImageBuffer> {
    if img.is_empty() {
        return Err(Error::InvalidInput("empty image".into()));
    }
    img.center_crop_square()
        .resize_bilinear(resolution, resolution)
        .map(|p| p.to_rgb())
}

/// Assigns `floor(n · val_fraction)` entries to validation after a seeded
/// shuffle; entry order is preserved.
pub fn split_manifest(manifest: &DatasetManifest, val_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidInput(format!(
            "val_fraction must lie in [0, 1), got {val_fraction}"
        )));
    }
    let n = manifest.entries.len();
    let n_val = (n as f64 * val_fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = Split::Train;
    }
    for &i in &order[..n_val] {
        out.entries[i].split = Split::Val;
    }
    Ok(out)
}

const SKIES: &[(&str, [f32; 3], [f32; 3])] = &[
    ("under a blue sky", [0.25, 0.45, 0.85], [0.70, 0.85, 0.98]),
    ("at sunset", [0.35, 0.20, 0.45], [0.98, 0.60, 0.30]),
    ("at dusk", [0.10, 0.08, 0.25], [0.45, 0.30, 0.55]),
    ("on a cloudy day", [0.55, 0.58, 0.62], [0.82, 0.84, 0.86]),
];

const GROUNDS: &[[f32; 3]] = &[[0.25, 0.50, 0.20], [0.70, 0.62, 0.40], [0.88, 0.90, 0.94], [0.40, 0.35, 0.28]];

/// A procedural landscape and its caption, deterministic in `index`. Scenes
/// combine a sky gradient, ridge lines, an optional sun, lake, trees and
/// house.
pub fn synthetic_scene(index: u64, resolution: usize) -> (ImageBuffer, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5CE4E ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let (sky_words, sky_top, sky_bottom) = SKIES[rng.random_range(0..SKIES.len())];
    let horizon: f32 = rng.random_range(0.55..0.75);
    let ground = GROUNDS[rng.random_range(0..GROUNDS.len())];

    let layers = rng.random_range(1..=2usize);
    let mut ridges: Vec<(Vec<(f32, f32)>, [f32; 3])> = Vec::new();
    for l in 0..layers {
        let peaks = rng.random_range(2..=4usize);
        let mut pts = vec![(0.0f32, horizon - rng.random_range(0.0..0.1))];
        for p in 0..peaks {
            let x = (p as f32 + rng.random_range(0.3..0.7)) / peaks as f32;
            pts.push((x, horizon - rng.random_range(0.15..0.45) / (l as f32 + 1.0)));
        }
        pts.push((1.0, horizon - rng.random_range(0.0..0.1)));
        let shade = 0.25 + 0.2 * l as f32 + rng.random_range(0.0..0.15);
        let tint = [shade * 0.9, shade * 0.95, shade * 1.1];
        ridges.push((pts, tint));
    }
    // Nearer layers are drawn last.
    ridges.reverse();

    let sun = rng
        .random_bool(0.6)
        .then(|| (rng.random_range(0.15..0.85f32), rng.random_range(0.1..0.3f32), rng.random_range(0.05..0.1f32)));
    let lake = rng
        .random_bool(0.4)
        .then(|| (rng.random_range(0.1..0.5f32), rng.random_range(0.3..0.5f32)));
    let trees: Vec<(f32, f32)> = if rng.random_bool(0.5) {
        (0..rng.random_range(2..=4))
            .map(|_| (rng.random_range(0.05..0.95f32), rng.random_range(0.06..0.12f32)))
            .collect()
    } else {
        Vec::new()
    };
    let house = rng
        .random_bool(0.35)
        .then(|| (rng.random_range(0.2..0.7f32), rng.random_range(0.12..0.2f32)));

    let ridge_y = |pts: &[(f32, f32)], x: f32| -> f32 {
        let i = pts.windows(2).position(|w| x <= w[1].0).unwrap_or(pts.len() - 2);
        let ((x0, y0), (x1, y1)) = (pts[i], pts[i + 1]);
        y0 + (y1 - y0) * ((x - x0) / (x1 - x0).max(1e-6)).clamp(0.0, 1.0)
    };
    let ground_top = horizon + 0.02;

    let shade = |u: f32, v: f32| -> [f32; 3] {
        let mut c = lerp3(sky_top, sky_bottom, (v / horizon).clamp(0.0, 1.0));
        if let Some((sx, sy, r)) = sun {
            if (u - sx).powi(2) + (v - sy).powi(2) < r * r {
                c = [1.0, 0.92, 0.6];
            }
        }
        for (pts, tint) in &ridges {
            if v >= ridge_y(pts, u) {
                c = *tint;
            }
        }
        if v >= ground_top {
            let depth = (v - ground_top) / (1.0 - ground_top);
            c = lerp3(ground, [ground[0] * 0.6, ground[1] * 0.6, ground[2] * 0.6], depth);
        }
        if let Some((lx, lw)) = lake {
            let ly = ground_top + 0.06;
            if v >= ly && v <= ly + 0.12 && u >= lx && u <= lx + lw {
                c = lerp3([0.2, 0.35, 0.65], sky_bottom, 0.3);
            }
        }
        for &(tx, size) in &trees {
            let base = ground_top + 0.1;
            let top = base - 2.0 * size;
            if v >= top && v <= base && (u - tx).abs() <= size * 0.5 * (v - top) / (base - top) {
                c = [0.08, 0.30, 0.12];
            }
        }
        if let Some((hx, size)) = house {
            let base = ground_top + 0.14;
            let wall_top = base - size;
            if v >= wall_top && v <= base && u >= hx && u <= hx + size {
                c = [0.80, 0.72, 0.62];
            }
            let roof_top = wall_top - size * 0.5;
            let mid = hx + size * 0.5;
            if v >= roof_top && v < wall_top && (u - mid).abs() <= size * 0.6 * (v - roof_top) / (wall_top - roof_top) {
                c = [0.55, 0.18, 0.12];
            }
        }
        c
    };

    // 2×2 supersampling softens polygon edges.
    let img = ImageBuffer::from_fn(resolution, resolution, 3, |y, x, ch| {
        let mut acc = 0.0;
        for (dy, dx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
            let u = (x as f32 + dx) / resolution as f32;
            let v = (y as f32 + dy) / resolution as f32;
            acc += shade(u, v)[ch];
        }
        acc / 4.0
    })
    .expect("scene dimensions are valid");

    let mut things = vec![if layers > 1 { "mountain ranges" } else { "a mountain" }];
    if sun.is_some() {
        things.push("the sun");
    }
    if lake.is_some() {
        things.push("a lake");
    }
    if !trees.is_empty() {
        things.push("trees");
    }
    if house.is_some() {
        things.push("a house");
    }
    let list = match things.len() {
        1 => things[0].to_string(),
        n => format!("{} and {}", things[..n - 1].join(", "), things[n - 1]),
    };
    (img, format!("{list} {sky_words}"))
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Writes `count` synthetic scenes as `scene_XXX.png` with caption sidecars.
pub fn write_synthetic_corpus(dir: impl AsRef<Path>, count: usize, resolution: usize) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let (img, caption) = synthetic_scene(i as u64, resolution);
        let path = dir.join(format!("scene_{i:03}.png"));
        img.save_png(&path)?;
        let txt = path.with_extension("txt");
        let mut f = std::fs::File::create(&txt).map_err(|e| Error::io(&txt, e))?;
        writeln!(f, "{caption}").map_err(|e| Error::io(&txt, e))?;
        paths.push(path);
    }
    Ok(paths)
}
