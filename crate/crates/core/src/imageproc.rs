//! Image decoding and the pre-processing chain: resize, rescale to `[0, 1]`,
//! Gaussian low-pass denoising and histogram equalization.

use image::{DynamicImage, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit image, row-major with interleaved channels (1 = gray, 3 = RGB).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "unsupported channel count {channels}"
            )));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} samples, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            pixels,
        })
    }

    fn at(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Decodes a PNG or JPEG stream. Alpha is dropped; gray stays single-channel.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    let format = image::guess_format(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Jpeg) {
        return Err(Error::Decode(format!("unsupported format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| Error::Decode(e.to_string()))?;
    let (width, height) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        RawImage::new(width, height, 1, img.into_luma8().into_raw())
    } else {
        RawImage::new(width, height, 3, img.into_rgb8().into_raw())
    }
}

/// Encodes as PNG (used for dataset inspection exports).
pub fn encode_png(img: &RawImage) -> Result<Vec<u8>> {
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.pixels, img.width as u32, img.height as u32, color)
        .map_err(|e| Error::Decode(e.to_string()))?;
    Ok(out)
}

/// Bilinear resampling with half-pixel centers; results round half-up.
pub fn resize_bilinear(img: &RawImage, out_w: usize, out_h: usize) -> Result<RawImage> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "target size {out_w}x{out_h} has a zero dimension"
        )));
    }
    if img.width == 0 || img.height == 0 {
        return Err(Error::InvalidArgument("source image is empty".into()));
    }
    if (out_w, out_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(out_w, img.width);
    let ys = taps(out_h, img.height);
    let c = img.channels;
    let mut pixels = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.at(x0, y0, ch) as f64 * (1.0 - fx) + img.at(x1, y0, ch) as f64 * fx;
                let bottom =
                    img.at(x0, y1, ch) as f64 * (1.0 - fx) + img.at(x1, y1, ch) as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(out_w, out_h, c, pixels)
}

/// Converts to an H×W×3 tensor of `sample / 255`; gray is replicated.
pub fn rescale_to_tensor(img: &RawImage) -> Tensor {
    let mut data = Vec::with_capacity(img.width * img.height * 3);
    for px in img.pixels.chunks(img.channels) {
        if img.channels == 1 {
            let v = px[0] as f32 / 255.0;
            data.extend_from_slice(&[v, v, v]);
        } else {
            data.extend(px.iter().map(|&s| s as f32 / 255.0));
        }
    }
    Tensor::new(vec![img.height, img.width, 3], data).expect("pixel count matches dimensions")
}

/// Inverse of [`rescale_to_tensor`] for an H×W×3 tensor (values clamped).
pub fn tensor_to_image(t: &Tensor) -> Result<RawImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected HxWx3, got {s:?}")));
    }
    let pixels = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    RawImage::new(s[1], s[0], 3, pixels)
}

/// Normalized 2-D Gaussian kernel of radius `ceil(3σ)`, row-major.
pub fn gaussian_kernel(sigma: f32) -> Result<(usize, Vec<f32>)> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let radius = (3.0 * sigma as f64).ceil() as usize;
    let side = 2 * radius + 1;
    let s2 = 2.0 * (sigma as f64).powi(2);
    let mut k = Vec::with_capacity(side * side);
    for dy in 0..side {
        for dx in 0..side {
            let (y, x) = (dy as f64 - radius as f64, dx as f64 - radius as f64);
            k.push((-(x * x + y * y) / s2).exp());
        }
    }
    let total: f64 = k.iter().sum();
    Ok((radius, k.iter().map(|v| (v / total) as f32).collect()))
}

/// Per-channel Gaussian blur with edge-replicate padding.
pub fn gaussian_lowpass(t: &Tensor, sigma: f32) -> Result<Tensor> {
    let (radius, kernel) = gaussian_kernel(sigma)?;
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("expected HxWxC, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let side = 2 * radius + 1;
    let src = t.data();
    let mut out = vec![0.0f32; src.len()];
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0f32;
                for ky in 0..side {
                    let sy = clampi(y as isize + ky as isize - radius as isize, h);
                    for kx in 0..side {
                        let sx = clampi(x as isize + kx as isize - radius as isize, w);
                        acc += kernel[ky * side + kx] * src[(sy * w + sx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn equalization_lut(hist: &[u64; 256], total: u64) -> Option<[f64; 256]> {
    let first = hist.iter().position(|&n| n > 0)?;
    let cdf_min = hist[first] as f64 / total as f64;
    if cdf_min >= 1.0 {
        return None;
    }
    let mut lut = [0.0; 256];
    let mut running = 0u64;
    for (v, &n) in hist.iter().enumerate() {
        running += n;
        let cdf = running as f64 / total as f64;
        lut[v] = (255.0 * (cdf - cdf_min) / (1.0 - cdf_min)).round().max(0.0);
    }
    Some(lut)
}

/// Histogram equalization. Gray images are remapped directly; RGB images
/// equalize luminance and scale each channel by the luminance ratio.
/// Single-valued histograms are returned unchanged.
pub fn equalize_hist(img: &RawImage) -> RawImage {
    let n_px = img.width * img.height;
    if n_px == 0 {
        return img.clone();
    }
    if img.channels == 1 {
        let mut hist = [0u64; 256];
        img.pixels.iter().for_each(|&p| hist[p as usize] += 1);
        let Some(lut) = equalization_lut(&hist, n_px as u64) else {
            return img.clone();
        };
        let pixels = img.pixels.iter().map(|&p| lut[p as usize] as u8).collect();
        return RawImage {
            pixels,
            ..img.clone()
        };
    }

    let luma: Vec<f64> = img
        .pixels
        .chunks(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    let mut hist = [0u64; 256];
    luma.iter()
        .for_each(|&y| hist[y.round().clamp(0.0, 255.0) as usize] += 1);
    let Some(lut) = equalization_lut(&hist, n_px as u64) else {
        return img.clone();
    };
    let mut pixels = img.pixels.clone();
    for (px, &y) in pixels.chunks_mut(3).zip(&luma) {
        if y <= 0.0 {
            continue;
        }
        let ratio = lut[y.round().clamp(0.0, 255.0) as usize] / y;
        for s in px.iter_mut() {
            *s = (*s as f64 * ratio).round().clamp(0.0, 255.0) as u8;
        }
    }
    RawImage {
        pixels,
        ..img.clone()
    }
}

/// Optional pre-processing applied between decoding and the network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    /// Gaussian low-pass sigma; `None` disables denoising.
    pub lowpass_sigma: Option<f32>,
    pub equalize: bool,
}

impl Preprocess {
    /// decode → equalize? → resize → rescale → low-pass?
    pub fn image_to_tensor(&self, bytes: &[u8], width: usize, height: usize) -> Result<Tensor> {
        self.raw_to_tensor(&decode_image(bytes)?, width, height)
    }

    pub fn raw_to_tensor(&self, img: &RawImage, width: usize, height: usize) -> Result<Tensor> {
        let resized = if self.equalize {
            resize_bilinear(&equalize_hist(img), width, height)?
        } else {
            resize_bilinear(img, width, height)?
        };
        let t = rescale_to_tensor(&resized);
        match self.lowpass_sigma {
            Some(sigma) => gaussian_lowpass(&t, sigma),
            None => Ok(t),
        }
    }
}
