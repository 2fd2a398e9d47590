//! Single-level 2D Haar wavelet decomposition and the tiled feature image
//! built from it.
//!
//! Filtering runs along rows first (low-pass `[1/√2, 1/√2]`, high-pass
//! `[-1/√2, 1/√2]`, each followed by dropping every other column), then
//! along columns of both intermediate results. With that pipeline:
//!
//! | band | row filter | column filter |
//! |------|------------|---------------|
//! | `A`  | low        | low           |
//! | `V`  | low        | high          |
//! | `H`  | high       | low           |
//! | `D`  | high       | high          |
//!
//! so a step between the top and bottom halves of an image lands in `V`.

use ndarray::{s, Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::imagecore::Image;

/// Feature-image side length whose stride-4 patchify gives 74×74 maps.
pub const DEFAULT_FEATURE_SIZE: usize = 296;

/// The four coefficient bands of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Subbands {
    pub a: Array2<f64>,
    pub h: Array2<f64>,
    pub v: Array2<f64>,
    pub d: Array2<f64>,
    /// Shape of the input before any boundary padding.
    pub source_shape: (usize, usize),
}

impl Subbands {
    pub fn bands(&self) -> [&Array2<f64>; 4] {
        [&self.a, &self.h, &self.v, &self.d]
    }

    pub fn energy(&self) -> f64 {
        self.bands().iter().map(|b| b.iter().map(|x| x * x).sum::<f64>()).sum()
    }

    /// Inverse transform cropped back to `source_shape`.
    pub fn reconstruct(&self) -> Result<Array2<f64>> {
        let full = idwt2_haar(self.a.view(), self.h.view(), self.v.view(), self.d.view())?;
        let (r, c) = self.source_shape;
        Ok(full.slice(s![..r, ..c]).to_owned())
    }
}

/// Per-channel decomposition of a whole image.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub channels: Vec<Subbands>,
}

impl SubbandSet {
    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }
}

/// Forward transform of one channel. Odd row or column counts are extended
/// by repeating the last row or column.
pub fn dwt2_haar(channel: ArrayView2<'_, f64>) -> Result<Subbands> {
    let (rows, cols) = channel.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid_input("cannot transform an empty matrix"));
    }
    let x = pad_even(channel);
    let (hr, hc) = (x.nrows() / 2, x.ncols() / 2);

    // Row then column filtering of each 2x2 block; the two 1/sqrt(2) factors
    // fold into one 0.5, which keeps integer inputs exact.
    let mut a = Array2::<f64>::zeros((hr, hc));
    let mut h = Array2::<f64>::zeros((hr, hc));
    let mut v = Array2::<f64>::zeros((hr, hc));
    let mut d = Array2::<f64>::zeros((hr, hc));
    for i in 0..hr {
        for j in 0..hc {
            let (p, q) = (x[[2 * i, 2 * j]], x[[2 * i, 2 * j + 1]]);
            let (r, s) = (x[[2 * i + 1, 2 * j]], x[[2 * i + 1, 2 * j + 1]]);
            let (top, bottom) = (p + q, r + s);
            let (left, right) = (p + r, q + s);
            a[[i, j]] = 0.5 * (top + bottom);
            v[[i, j]] = 0.5 * (bottom - top);
            h[[i, j]] = 0.5 * (right - left);
            d[[i, j]] = 0.5 * ((p + s) - (q + r));
        }
    }
    Ok(Subbands {
        a,
        h,
        v,
        d,
        source_shape: (rows, cols),
    })
}

/// Inverse transform; returns the even-shaped reconstruction.
pub fn idwt2_haar(
    a: ArrayView2<'_, f64>,
    h: ArrayView2<'_, f64>,
    v: ArrayView2<'_, f64>,
    d: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let shape = a.dim();
    if h.dim() != shape || v.dim() != shape || d.dim() != shape {
        return Err(Error::invalid_input(format!(
            "sub-band shapes differ: A {:?}, H {:?}, V {:?}, D {:?}",
            shape,
            h.dim(),
            v.dim(),
            d.dim()
        )));
    }
    let (hr, hc) = shape;
    if hr == 0 || hc == 0 {
        return Err(Error::invalid_input("empty sub-bands"));
    }

    let mut out = Array2::<f64>::zeros((2 * hr, 2 * hc));
    for i in 0..hr {
        for j in 0..hc {
            let (lo_lo, lo_hi) = (a[[i, j]] - v[[i, j]], a[[i, j]] + v[[i, j]]);
            let (hi_lo, hi_hi) = (h[[i, j]] - d[[i, j]], h[[i, j]] + d[[i, j]]);
            out[[2 * i, 2 * j]] = 0.5 * (lo_lo - hi_lo);
            out[[2 * i, 2 * j + 1]] = 0.5 * (lo_lo + hi_lo);
            out[[2 * i + 1, 2 * j]] = 0.5 * (lo_hi - hi_hi);
            out[[2 * i + 1, 2 * j + 1]] = 0.5 * (lo_hi + hi_hi);
        }
    }
    Ok(out)
}

fn pad_even(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let (pr, pc) = (rows + rows % 2, cols + cols % 2);
    if (pr, pc) == (rows, cols) {
        return x.to_owned();
    }
    Array2::from_shape_fn((pr, pc), |(r, c)| x[[r.min(rows - 1), c.min(cols - 1)]])
}

/// Decomposes every channel of an image independently.
pub fn decompose(img: &Image) -> Result<SubbandSet> {
    let channels = img
        .pixels()
        .axis_iter(Axis(2))
        .map(|ch| dwt2_haar(ch))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubbandSet { channels })
}

/// Which sub-band occupies a quadrant of the tiled feature image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const LAYOUT: [(Quadrant, char); 4] = [
        (Quadrant::TopLeft, 'A'),
        (Quadrant::TopRight, 'H'),
        (Quadrant::BottomLeft, 'V'),
        (Quadrant::BottomRight, 'D'),
    ];
}

/// 8-bit tiled sub-band image: `A | H` over `V | D`, per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pixels: Array3<u8>,
}

impl FeatureImage {
    pub fn pixels(&self) -> &Array3<u8> {
        &self.pixels
    }

    pub fn quadrant(&self, q: Quadrant) -> Array3<u8> {
        let (h, w, _) = self.pixels.dim();
        let (hh, hw) = (h / 2, w / 2);
        let view = match q {
            Quadrant::TopLeft => self.pixels.slice(s![..hh, ..hw, ..]),
            Quadrant::TopRight => self.pixels.slice(s![..hh, hw.., ..]),
            Quadrant::BottomLeft => self.pixels.slice(s![hh.., ..hw, ..]),
            Quadrant::BottomRight => self.pixels.slice(s![hh.., hw.., ..]),
        };
        view.to_owned()
    }

    pub fn to_image(&self, id: impl Into<String>) -> Image {
        Image::from_trusted(id, self.pixels.mapv(|v| v as f64 / 255.0))
    }
}

/// Min-max scales one band to integers in `[0, 255]`; a flat band maps to 0.
fn scale_band_u8(band: &Array2<f64>) -> Array2<u8> {
    let (lo, hi) = band
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return Array2::zeros(band.dim());
    }
    band.mapv(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
}

/// Builds the 8-bit tiled feature image of an RGB image.
pub fn wavelet_feature_tile(img: &Image) -> Result<FeatureImage> {
    if img.channels() != 3 {
        return Err(Error::invalid_input(format!(
            "wavelet features need an RGB image, got {} channels",
            img.channels()
        )));
    }
    let set = decompose(img)?;
    let (qh, qw) = set.channels[0].a.dim();
    let mut pixels = Array3::<u8>::zeros((2 * qh, 2 * qw, 3));
    for (c, bands) in set.channels.iter().enumerate() {
        let tiles = [
            (0, 0, &bands.a),
            (0, qw, &bands.h),
            (qh, 0, &bands.v),
            (qh, qw, &bands.d),
        ];
        for (r0, c0, band) in tiles {
            let scaled = scale_band_u8(band);
            pixels
                .slice_mut(s![r0..r0 + qh, c0..c0 + qw, c])
                .assign(&scaled);
        }
    }
    Ok(FeatureImage { pixels })
}

/// Tiled feature image resized to `target_size`² and expressed in `[0, 1]`.
pub fn wavelet_feature_image(img: &Image, target_size: usize) -> Result<Image> {
    let tile = wavelet_feature_tile(img)?;
    tile.to_image(img.id()).resized(target_size, target_size)
}
