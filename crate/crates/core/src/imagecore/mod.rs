//! Image rasters, deterministic loading, normalization and training-time
//! augmentation.
//!
//! Pixels are stored channel-last as `[height, width, channels]` in `f64`.

mod augment;
mod color;

use std::path::Path;

use ndarray::{Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentConfig};
pub use color::{hsv_to_rgb, rgb_to_hsv};

/// A raster with pixel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Array3<f64>,
    id: String,
}

impl Image {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::invalid_input("image has a zero dimension"));
        }
        if c != 1 && c != 3 {
            return Err(Error::invalid_input(format!(
                "image must have 1 or 3 channels, got {c}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid_input(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Image {
            pixels: pixels.as_standard_layout().into_owned(),
            id: id.into(),
        })
    }

    /// Builds an image from pixels already known to be in range.
    pub(crate) fn from_trusted(id: impl Into<String>, pixels: Array3<f64>) -> Self {
        debug_assert!(pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        Image {
            pixels: pixels.as_standard_layout().into_owned(),
            id: id.into(),
        }
    }

    pub fn from_rgb8(id: impl Into<String>, img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::invalid_input("image has a zero dimension"));
        }
        let pixels = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
            img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0
        });
        Ok(Image::from_trusted(id, pixels))
    }

    /// Quantizes to 8 bits; grayscale images are replicated to RGB.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w, c) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.pixels[[y as usize, x as usize, ch.min(c - 1)]];
                (v * 255.0).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn pixels(&self) -> ArrayView3<'_, f64> {
        self.pixels.view()
    }

    pub fn into_pixels(self) -> Array3<f64> {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn resized(&self, height: usize, width: usize) -> Result<Image> {
        let pixels = resize_bilinear(self.pixels.view(), height, width)?;
        Ok(Image::from_trusted(self.id.clone(), pixels))
    }
}

/// Loads a PNG or JPEG file as RGB and resizes it to `target_size`².
pub fn load_image(path: &Path, target_size: usize) -> Result<Image> {
    if target_size == 0 {
        return Err(Error::invalid_input("target size must be positive"));
    }
    let decode_err = |reason: String| Error::Decode {
        path: path.to_path_buf(),
        reason,
    };
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::io::Reader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| decode_err(e.to_string()))?
        .decode()
        .map_err(|e| decode_err(e.to_string()))?;
    if decoded.width() == 0 || decoded.height() == 0 {
        return Err(Error::invalid_input(format!(
            "{} has a zero dimension",
            path.display()
        )));
    }
    let id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let img = Image::from_rgb8(id, &decoded.to_rgb8())?;
    img.resized(target_size, target_size)
}

/// Resizes with bilinear interpolation using half-pixel centers and clamped
/// borders. Equal sizes return an exact copy.
pub fn resize_bilinear(src: ArrayView3<'_, f64>, height: usize, width: usize) -> Result<Array3<f64>> {
    let (h, w, _) = src.dim();
    if height == 0 || width == 0 || h == 0 || w == 0 {
        return Err(Error::invalid_input("cannot resize to or from a zero dimension"));
    }
    if h == height && w == width {
        return Ok(src.to_owned());
    }
    let sy = h as f64 / height as f64;
    let sx = w as f64 / width as f64;
    Ok(sample_grid(src, height, width, |oy, ox| {
        ((oy as f64 + 0.5) * sy - 0.5, (ox as f64 + 0.5) * sx - 0.5)
    }))
}

/// Fills an `out_h × out_w` raster by bilinearly sampling `src` at the
/// coordinates returned by `map` (row, col). Out-of-range coordinates
/// replicate the nearest edge.
pub(crate) fn sample_grid<F>(src: ArrayView3<'_, f64>, out_h: usize, out_w: usize, map: F) -> Array3<f64>
where
    F: Fn(usize, usize) -> (f64, f64),
{
    let (h, w, c) = src.dim();
    let mut out = Array3::<f64>::zeros((out_h, out_w, c));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (y, x) = map(oy, ox);
            let y = y.clamp(0.0, (h - 1) as f64);
            let x = x.clamp(0.0, (w - 1) as f64);
            let y0 = y.floor() as usize;
            let x0 = x.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fy = y - y0 as f64;
            let fx = x - x0 as f64;
            for ch in 0..c {
                let top = lerp(src[[y0, x0, ch]], src[[y0, x1, ch]], fx);
                let bottom = lerp(src[[y1, x0, ch]], src[[y1, x1, ch]], fx);
                out[[oy, ox, ch]] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

// Exact at t == 0 and t == 1.
#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + (b - a) * t
    }
}

/// Per-channel affine normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn imagenet() -> Self {
        NormalizationStats {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::InvalidStats(format!(
                "expected {channels} channels, stats have mean {} / std {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidStats("std must be strictly positive".into()));
        }
        Ok(())
    }

    /// Image of the pixel interval `[0, 1]` under normalization, per channel.
    pub fn normalized_range(&self) -> Vec<(f64, f64)> {
        self.mean
            .iter()
            .zip(&self.std)
            .map(|(m, s)| ((0.0 - m) / s, (1.0 - m) / s))
            .collect()
    }
}

impl Default for NormalizationStats {
    fn default() -> Self {
        Self::imagenet()
    }
}

/// `out[c] = (in[c] - mean[c]) / std[c]`.
pub fn normalize(img: &Image, stats: &NormalizationStats) -> Result<Array3<f64>> {
    stats.validate(img.channels())?;
    let mut out = img.pixels.clone();
    for (c, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        lane.mapv_inplace(|v| (v - m) / s);
    }
    Ok(out)
}

/// Inverse of [`normalize`].
pub fn denormalize(tensor: ArrayView3<'_, f64>, stats: &NormalizationStats) -> Result<Array3<f64>> {
    stats.validate(tensor.dim().2)?;
    let mut out = tensor.to_owned();
    for (c, mut lane) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (m, s) = (stats.mean[c], stats.std[c]);
        lane.mapv_inplace(|v| v * s + m);
    }
    Ok(out)
}
