//! Edge-domain standardization.
//!
//! Photos (at training time) and hand-drawn sketches (at inference time) are
//! both mapped through the same deterministic Canny-style detector:
//!
//! grayscale → Gaussian blur → central-difference gradient → non-maximum
//! suppression → line consolidation → hysteresis → optional binarization.
//!
//! Line consolidation closes one-pixel gaps between parallel responses and
//! thins the result to single-pixel centerlines.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{EdgeMap, ImageBuffer};

/// Ties in non-maximum suppression are resolved as "keep" within this slack.
pub const NMS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeParams {
    pub blur_sigma: f64,
    pub low_threshold: f64,
    pub high_threshold: f64,
    pub binarize: bool,
    /// Close and thin candidate edges into centerlines.
    pub thin_lines: bool,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            blur_sigma: 1.0,
            low_threshold: 0.1,
            high_threshold: 0.2,
            binarize: false,
            thin_lines: true,
        }
    }
}

impl EdgeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "blur_sigma must be > 0, got {}",
                self.blur_sigma
            )));
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.low_threshold) || !unit(self.high_threshold) {
            return Err(Error::InvalidInput("thresholds must lie in (0, 1)".into()));
        }
        if self.low_threshold >= self.high_threshold {
            return Err(Error::InvalidInput(format!(
                "low_threshold {} must be below high_threshold {}",
                self.low_threshold, self.high_threshold
            )));
        }
        Ok(())
    }
}

/// Maps a photo or sketch into the standardized edge domain.
pub fn standardize(image: &ImageBuffer, params: &EdgeParams) -> Result<EdgeMap> {
    params.validate()?;
    if image.is_empty() {
        return Err(Error::InvalidInput("zero-sized image".into()));
    }
    let (h, w) = (image.height(), image.width());
    let gray: Vec<f64> = image.to_gray().data().iter().map(|&v| v as f64).collect();
    let blurred = gaussian_blur(&gray, h, w, params.blur_sigma);
    let (mag, gx, gy) = gradient(&blurred, h, w);
    let candidates = non_max_suppression(&mag, &gx, &gy, h, w, params.low_threshold);

    let strength = if params.thin_lines {
        consolidate(&candidates, h, w)
    } else {
        candidates
    };
    let kept = hysteresis(&strength, h, w, params.high_threshold);

    let data = strength
        .iter()
        .zip(&kept)
        .map(|(&s, &k)| match (k, params.binarize) {
            (false, _) => 0.0,
            (true, true) => 1.0,
            (true, false) => s as f32,
        })
        .collect();
    EdgeMap::new(h, w, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable blur with replicated borders.
fn gaussian_blur(src: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * src[y * w + clampi(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clampi(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Central differences with replicated borders. Magnitude is scaled by √2 so
/// an ideal unit step reads as 1, then clamped to `[0, 1]`.
fn gradient(src: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mag = vec![0.0; h * w];
    let mut gx = vec![0.0; h * w];
    let mut gy = vec![0.0; h * w];
    for y in 0..h {
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        for x in 0..w {
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let dx = (src[y * w + xr] - src[y * w + xl]) / 2.0;
            let dy = (src[yd * w + x] - src[yu * w + x]) / 2.0;
            gx[y * w + x] = dx;
            gy[y * w + x] = dy;
            mag[y * w + x] = ((dx * dx + dy * dy).sqrt() * std::f64::consts::SQRT_2).min(1.0);
        }
    }
    (mag, gx, gy)
}

/// Neighbor offsets `(dy, dx)` along the quantized gradient direction.
fn direction_offset(dx: f64, dy: f64) -> (isize, isize) {
    let mut angle = dy.atan2(dx).to_degrees();
    if angle < 0.0 {
        angle += 180.0;
    }
    if !(22.5..157.5).contains(&angle) {
        (0, 1)
    } else if angle < 67.5 {
        (1, 1)
    } else if angle < 112.5 {
        (1, 0)
    } else {
        (1, -1)
    }
}

/// Returns the magnitude at surviving local maxima (≥ `low`), zero elsewhere.
fn non_max_suppression(
    mag: &[f64],
    gx: &[f64],
    gy: &[f64],
    h: usize,
    w: usize,
    low: f64,
) -> Vec<f64> {
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let m = mag[i];
            if m < low {
                continue;
            }
            let (oy, ox) = direction_offset(gx[i], gy[i]);
            let (yi, xi) = (y as isize, x as isize);
            let a = at(yi + oy, xi + ox);
            let b = at(yi - oy, xi - ox);
            if m + NMS_TOLERANCE >= a && m + NMS_TOLERANCE >= b {
                out[i] = m;
            }
        }
    }
    out
}

/// 3×3 closing followed by Zhang–Suen thinning. Each surviving pixel takes
/// the strongest candidate magnitude in its 3×3 neighborhood.
fn consolidate(candidates: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mask: Vec<bool> = candidates.iter().map(|&v| v > 0.0).collect();
    let closed = erode(&dilate(&mask, h, w), h, w);
    let thin = zhang_suen(closed, h, w);
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            if !thin[y * w + x] {
                continue;
            }
            let mut best = 0.0f64;
            for (ny, nx) in neighborhood(y, x, h, w) {
                best = best.max(candidates[ny * w + nx]);
            }
            out[y * w + x] = best;
        }
    }
    out
}

/// In-bounds 3×3 neighborhood including the center.
fn neighborhood(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let ys = y.saturating_sub(1)..=(y + 1).min(h - 1);
    ys.flat_map(move |ny| (x.saturating_sub(1)..=(x + 1).min(w - 1)).map(move |nx| (ny, nx)))
}

fn dilate(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = neighborhood(y, x, h, w).any(|(ny, nx)| mask[ny * w + nx]);
        }
    }
    out
}

/// Pixels outside the image do not erode the border.
fn erode(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = neighborhood(y, x, h, w).all(|(ny, nx)| mask[ny * w + nx]);
        }
    }
    out
}

fn zhang_suen(mut img: Vec<bool>, h: usize, w: usize) -> Vec<bool> {
    let px = |img: &[bool], y: isize, x: isize| -> u8 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0
        } else {
            img[y as usize * w + x as usize] as u8
        }
    };
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if px(&img, y, x) == 0 {
                        continue;
                    }
                    // P2..P9 clockwise starting north.
                    let n = [
                        px(&img, y - 1, x),
                        px(&img, y - 1, x + 1),
                        px(&img, y, x + 1),
                        px(&img, y + 1, x + 1),
                        px(&img, y + 1, x),
                        px(&img, y + 1, x - 1),
                        px(&img, y, x - 1),
                        px(&img, y - 1, x - 1),
                    ];
                    let b: u8 = n.iter().sum();
                    let a = (0..8).filter(|&i| n[i] == 0 && n[(i + 1) % 8] == 1).count();
                    let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
                    let cond = if pass == 0 {
                        p2 * p4 * p6 == 0 && p4 * p6 * p8 == 0
                    } else {
                        p2 * p4 * p8 == 0 && p2 * p6 * p8 == 0
                    };
                    if (2..=6).contains(&b) && a == 1 && cond {
                        remove.push(y as usize * w + x as usize);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                img[i] = false;
            }
        }
        if !changed {
            return img;
        }
    }
}

/// Keeps 8-connected components of nonzero strength that contain at least
/// one pixel at or above `high`.
fn hysteresis(strength: &[f64], h: usize, w: usize, high: f64) -> Vec<bool> {
    let mut kept = vec![false; h * w];
    let mut stack: Vec<usize> = (0..h * w).filter(|&i| strength[i] >= high).collect();
    for &i in &stack {
        kept[i] = true;
    }
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        for (ny, nx) in neighborhood(y, x, h, w) {
            let j = ny * w + nx;
            if !kept[j] && strength[j] > 0.0 {
                kept[j] = true;
                stack.push(j);
            }
        }
    }
    kept
}

/// Loads an edge raster produced by an external detector (or a scanned
/// sketch) and normalizes it to edge polarity and the requested size.
pub fn load_external_edges(path: impl AsRef<Path>, expected_size: (usize, usize)) -> Result<EdgeMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if img.color() != image::ColorType::L8 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("expected 8-bit grayscale, found {:?}", img.color()),
        });
    }
    normalize_sketch(&ImageBuffer::from_dynamic(&img), expected_size)
}

/// Polarity normalization (dark-on-light inputs are inverted so that
/// 1 = line) and area resampling to `expected_size` (height, width).
pub fn normalize_sketch(img: &ImageBuffer, expected_size: (usize, usize)) -> Result<EdgeMap> {
    if img.is_empty() {
        return Err(Error::InvalidInput("zero-sized sketch".into()));
    }
    let gray = img.to_gray();
    let mean = gray.data().iter().map(|&v| v as f64).sum::<f64>() / gray.data().len() as f64;
    let oriented = if mean > 0.5 {
        ImageBuffer::new(
            gray.height(),
            gray.width(),
            1,
            gray.data().iter().map(|v| 1.0 - v).collect(),
        )?
    } else {
        gray
    };
    let (h, w) = expected_size;
    let sized = if (oriented.height(), oriented.width()) == (h, w) {
        oriented
    } else {
        oriented.resize_area(h, w)?
    };
    EdgeMap::from_image(&sized)
}

#[derive(Debug, Default, Clone, PartialEq, Serialize)]
pub struct BatchReport {
    pub count: usize,
    pub failures: Vec<(PathBuf, String)>,
}

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];

pub(crate) fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Standardizes every image in `input_dir` into `<output_dir>/<stem>.png`.
/// Files that fail to decode are recorded and skipped.
pub fn batch_standardize(
    input_dir: impl AsRef<Path>,
    output_dir: impl AsRef<Path>,
    params: &EdgeParams,
) -> Result<BatchReport> {
    params.validate()?;
    let input_dir = input_dir.as_ref();
    let output_dir = output_dir.as_ref();
    let mut files: Vec<PathBuf> = std::fs::read_dir(input_dir)
        .map_err(|e| Error::io(input_dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort();
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;

    let mut report = BatchReport::default();
    for file in files {
        let result = ImageBuffer::load_png(&file)
            .and_then(|img| standardize(&img, params))
            .and_then(|edges| {
                let stem = file.file_stem().unwrap_or_default();
                edges.save_png(output_dir.join(stem).with_extension("png"))
            });
        match result {
            Ok(()) => report.count += 1,
            Err(e) => report.failures.push((file, e.to_string())),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_image(size: usize) -> ImageBuffer {
        ImageBuffer::from_fn(size, size, 1, |_, x, _| if x < size / 2 { 0.0 } else { 1.0 })
            .unwrap()
    }

    fn binarized() -> EdgeParams {
        EdgeParams {
            binarize: true,
            ..EdgeParams::default()
        }
    }

    #[test]
    fn constant_image_has_no_edges() {
        let img = ImageBuffer::filled(32, 32, 3, 0.4).unwrap();
        let e = standardize(&img, &EdgeParams::default()).unwrap();
        assert_eq!(e.count_nonzero(), 0);
    }

    #[test]
    fn step_edges_sit_next_to_the_step() {
        let e = standardize(&step_image(8), &binarized()).unwrap();
        assert!(e.count_nonzero() > 0);
        for y in 0..8 {
            for x in 0..8 {
                if e.get(y, x) > 0.0 {
                    assert!(x == 3 || x == 4, "edge at column {x}");
                    assert_eq!(e.get(y, x), 1.0);
                }
            }
        }
    }

    #[test]
    fn restandardizing_stays_in_the_domain() {
        let p = binarized();
        let once = standardize(&step_image(8), &p).unwrap();
        let twice = standardize(&once.to_image(), &p).unwrap();
        assert!(once.iou(&twice) >= 0.5, "iou {}", once.iou(&twice));
    }

    #[test]
    fn zero_sized_image_is_rejected() {
        let img = ImageBuffer::new(0, 0, 1, vec![]).unwrap();
        assert!(matches!(
            standardize(&img, &EdgeParams::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn invalid_thresholds_are_rejected() {
        let p = EdgeParams {
            low_threshold: 0.3,
            high_threshold: 0.2,
            ..EdgeParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn drawn_line_maps_to_a_single_centerline() {
        let img = ImageBuffer::from_fn(16, 16, 1, |_, x, _| if (7..=8).contains(&x) { 0.0 } else { 1.0 })
            .unwrap();
        let e = standardize(&img, &binarized()).unwrap();
        for y in 2..14 {
            let row: usize = (0..16).filter(|&x| e.get(y, x) > 0.0).count();
            assert_eq!(row, 1, "row {y}");
        }
    }
}
