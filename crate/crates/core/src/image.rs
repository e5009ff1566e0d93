//! Raster types shared by every stage: [`ImageBuffer`] for photos and
//! sketches, [`EdgeMap`] for the standardized edge domain.
//!
//! Pixels are `f32` in `[0, 1]`, row-major, channels interleaved.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidInput(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(height * width * channels, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from a per-pixel closure; values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(clamp01(f(y, x, c)));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![clamp01(value); height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Rec. 601 luma; single-channel images are returned unchanged.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| clamp01(0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]))
            .collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.data[(y * self.width + x) * self.channels + c] =
                        self.get(y, self.width - 1 - x, c);
                }
            }
        }
        out
    }

    /// Largest centered square.
    pub fn center_crop_square(&self) -> ImageBuffer {
        let side = self.height.min(self.width);
        let y0 = (self.height - side) / 2;
        let x0 = (self.width - side) / 2;
        let mut data = Vec::with_capacity(side * side * self.channels);
        for y in y0..y0 + side {
            let row = (y * self.width + x0) * self.channels;
            data.extend_from_slice(&self.data[row..row + side * self.channels]);
        }
        ImageBuffer {
            height: side,
            width: side,
            channels: self.channels,
            data,
        }
    }

    /// Bilinear (triangle filter) resize; the filter support widens when
    /// shrinking.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<ImageBuffer> {
        if height == 0 || width == 0 || self.is_empty() {
            return Err(Error::InvalidInput("cannot resize to or from an empty image".into()));
        }
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let (w, h) = (self.width as u32, self.height as u32);
        let data = if self.channels == 3 {
            let src = image::Rgb32FImage::from_raw(w, h, self.data.clone())
                .ok_or_else(|| Error::InvalidInput("bad raster length".into()))?;
            image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle)
                .into_raw()
        } else {
            let src: image::ImageBuffer<image::Luma<f32>, Vec<f32>> =
                image::ImageBuffer::from_raw(w, h, self.data.clone())
                    .ok_or_else(|| Error::InvalidInput("bad raster length".into()))?;
            image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle)
                .into_raw()
        };
        Ok(ImageBuffer {
            height,
            width,
            channels: self.channels,
            data: data.into_iter().map(clamp01).collect(),
        })
    }

    /// Area-averaging resample: every output pixel is the coverage-weighted
    /// mean of the source pixels under its footprint. For integer ratios this
    /// is an exact block mean.
    pub fn resize_area(&self, height: usize, width: usize) -> Result<ImageBuffer> {
        if height == 0 || width == 0 || self.is_empty() {
            return Err(Error::InvalidInput("cannot resize to or from an empty image".into()));
        }
        let ys = area_weights(self.height, height);
        let xs = area_weights(self.width, width);
        let mut data = vec![0f32; height * width * self.channels];
        for (oy, wy) in ys.iter().enumerate() {
            for (ox, wx) in xs.iter().enumerate() {
                for c in 0..self.channels {
                    let mut acc = 0f64;
                    let mut norm = 0f64;
                    for &(sy, ay) in wy {
                        for &(sx, ax) in wx {
                            let w = ay * ax;
                            acc += w * self.get(sy, sx, c) as f64;
                            norm += w;
                        }
                    }
                    data[(oy * width + ox) * self.channels + c] = clamp01((acc / norm) as f32);
                }
            }
        }
        Ok(ImageBuffer {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// Channels-first tensor `(C, H, W)` with values in `[0, 1]`.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (self.height, self.width, self.channels), device)?;
        Ok(t.permute((2, 0, 1))?.contiguous()?)
    }

    /// Inverse of [`ImageBuffer::to_tensor`]; values are clamped and
    /// non-finite values become 0.
    pub fn from_tensor(t: &Tensor) -> Result<ImageBuffer> {
        let (c, h, w) = t.dims3()?;
        let data: Vec<f32> = t
            .to_dtype(DType::F32)?
            .permute((1, 2, 0))?
            .flatten_all()?
            .to_vec1()?;
        ImageBuffer::new(h, w, c, data.into_iter().map(clamp01).collect())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| decode_error(path, e))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<ImageBuffer> {
        let img = image::load_from_memory(bytes)
            .map_err(|e| Error::Decode {
                path: "<memory>".into(),
                reason: e.to_string(),
            })?;
        Ok(Self::from_dynamic(&img))
    }

    pub(crate) fn from_dynamic(img: &image::DynamicImage) -> ImageBuffer {
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let l = img.to_luma8();
            let (w, h) = l.dimensions();
            ImageBuffer {
                height: h as usize,
                width: w as usize,
                channels: 1,
                data: l.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            }
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            ImageBuffer {
                height: h as usize,
                width: w as usize,
                channels: 3,
                data: rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            }
        }
    }

    /// Quantized 8-bit bytes, rounding to nearest.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        let mut out = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            encoder,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::InvalidInput(format!("png encode: {e}")))?;
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode_png()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Single-channel standardized edge raster; `1` marks an edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl EdgeMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("edge value {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }

    /// Treats a single-channel raster as already being in edge polarity.
    pub fn from_image(img: &ImageBuffer) -> Result<Self> {
        let gray = img.to_gray();
        Self::new(gray.height, gray.width, gray.data)
    }

    /// Writes white-on-black 8-bit grayscale.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_image().save_png(path)
    }

    /// Intersection-over-union of the nonzero sets.
    pub fn iou(&self, other: &EdgeMap) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (a, b) in self.data.iter().zip(&other.data) {
            let (a, b) = (*a > 0.0, *b > 0.0);
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

#[inline]
pub(crate) fn clamp01(v: f32) -> f32 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (clamp01(v) * 255.0).round() as u8
}

fn decode_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// For each output index, the source indices it covers and the overlap length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = lo + scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            let mut ws: Vec<(usize, f64)> = (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect();
            if ws.is_empty() {
                ws.push((first.min(src - 1), 1.0));
            }
            ws
        })
        .collect()
}
