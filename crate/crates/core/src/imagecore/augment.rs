use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{color, sample_grid, Image};
use crate::error::{Error, Result};

/// Training-time augmentation parameters. Operations are applied in the
/// fixed order flip, rotate, color jitter, random resized crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub hflip_prob: f64,
    pub rotation_max_deg: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - s, 1 + s]`; hue shifts by at most `s / 2` of the hue circle.
    pub jitter_strength: f64,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub output_size: usize,
}

impl AugmentConfig {
    /// Flip 50%, rotation up to 10°, 20% jitter, crop area 80%–120%, 224².
    pub fn standard() -> Self {
        AugmentConfig {
            hflip_prob: 0.5,
            rotation_max_deg: 10.0,
            jitter_strength: 0.2,
            crop_scale_min: 0.8,
            crop_scale_max: 1.2,
            output_size: 224,
        }
    }

    /// A configuration that leaves a square `size × size` image untouched.
    pub fn identity(size: usize) -> Self {
        AugmentConfig {
            hflip_prob: 0.0,
            rotation_max_deg: 0.0,
            jitter_strength: 0.0,
            crop_scale_min: 1.0,
            crop_scale_max: 1.0,
            output_size: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::invalid_config("hflip_prob must lie in [0, 1]"));
        }
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            return Err(Error::invalid_config("rotation_max_deg must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.jitter_strength) {
            return Err(Error::invalid_config("jitter_strength must lie in [0, 1]"));
        }
        if !(self.crop_scale_min > 0.0 && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max.is_finite()) {
            return Err(Error::invalid_config(
                "crop scale bounds must be positive with min <= max",
            ));
        }
        if self.output_size == 0 {
            return Err(Error::invalid_config("output_size must be positive"));
        }
        Ok(())
    }
}

struct Draws {
    flip: bool,
    angle_deg: f64,
    brightness: f64,
    contrast: f64,
    saturation: f64,
    hue_shift: f64,
    crop_scale: f64,
    crop_u: f64,
    crop_v: f64,
}

impl Draws {
    // Every draw is taken unconditionally so the stream layout does not
    // depend on the configuration.
    fn sample(cfg: &AugmentConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = cfg.jitter_strength;
        let factor = |rng: &mut ChaCha8Rng| 1.0 - j + 2.0 * j * rng.gen::<f64>();
        let flip = rng.gen::<f64>() < cfg.hflip_prob;
        let angle_deg = cfg.rotation_max_deg * rng.gen::<f64>();
        let brightness = factor(&mut rng);
        let contrast = factor(&mut rng);
        let saturation = factor(&mut rng);
        let hue_shift = j * (rng.gen::<f64>() - 0.5);
        let crop_scale = cfg.crop_scale_min + (cfg.crop_scale_max - cfg.crop_scale_min) * rng.gen::<f64>();
        let crop_u = rng.gen::<f64>();
        let crop_v = rng.gen::<f64>();
        Draws {
            flip,
            angle_deg,
            brightness,
            contrast,
            saturation,
            hue_shift,
            crop_scale,
            crop_u,
            crop_v,
        }
    }
}

/// Applies the augmentation pipeline, deterministically for a given seed.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng_seed: u64) -> Result<Image> {
    cfg.validate()?;
    let (h, w, _) = img.pixels().dim();
    let min_side = (cfg.crop_scale_min.sqrt() * h.min(w) as f64).floor();
    if min_side < 1.0 {
        return Err(Error::invalid_config(format!(
            "crop scale {} leaves less than one pixel of a {h}x{w} image",
            cfg.crop_scale_min
        )));
    }
    let d = Draws::sample(cfg, rng_seed);
    let mut px = img.pixels().to_owned();

    if d.flip {
        px.invert_axis(Axis(1));
        px = px.as_standard_layout().into_owned();
    }
    if d.angle_deg != 0.0 {
        px = rotate(&px, d.angle_deg);
    }
    if cfg.jitter_strength > 0.0 {
        jitter(&mut px, &d);
    }
    px = resized_crop(&px, &d, cfg.output_size);
    px.mapv_inplace(|v| v.clamp(0.0, 1.0));
    Ok(Image::from_trusted(img.id().to_string(), px))
}

// Counter-clockwise rotation about the image center, edge-replicated.
fn rotate(px: &Array3<f64>, angle_deg: f64) -> Array3<f64> {
    let (h, w, _) = px.dim();
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    sample_grid(px.view(), h, w, |oy, ox| {
        let dy = oy as f64 - cy;
        let dx = ox as f64 - cx;
        (cy + cos * dy - sin * dx, cx + sin * dy + cos * dx)
    })
}

fn jitter(px: &mut Array3<f64>, d: &Draws) {
    px.mapv_inplace(|v| (v * d.brightness).clamp(0.0, 1.0));

    let channels = px.dim().2;
    let gray_mean = if channels == 3 {
        px.outer_iter()
            .flat_map(|row| {
                row.outer_iter()
                    .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                    .collect::<Vec<_>>()
            })
            .sum::<f64>()
            / (px.len() / 3) as f64
    } else {
        px.mean().unwrap_or(0.0)
    };
    px.mapv_inplace(|v| ((v - gray_mean) * d.contrast + gray_mean).clamp(0.0, 1.0));

    if channels != 3 {
        return;
    }
    for mut row in px.outer_iter_mut() {
        for mut p in row.outer_iter_mut() {
            let (hue, sat, val) = color::rgb_to_hsv(p[0], p[1], p[2]);
            let sat = (sat * d.saturation).clamp(0.0, 1.0);
            let hue = (hue + d.hue_shift).rem_euclid(1.0);
            let (r, g, b) = color::hsv_to_rgb(hue, sat, val);
            p[0] = r;
            p[1] = g;
            p[2] = b;
        }
    }
}

// Crop keeps the input aspect ratio; its area is `crop_scale` times the
// input area, so scales above one sample past the border (edge-replicated).
fn resized_crop(px: &Array3<f64>, d: &Draws, out: usize) -> Array3<f64> {
    let (h, w, _) = px.dim();
    let side = d.crop_scale.sqrt();
    let ch = h as f64 * side;
    let cw = w as f64 * side;
    let y0 = (h as f64 - ch) * d.crop_v;
    let x0 = (w as f64 - cw) * d.crop_u;
    let sy = ch / out as f64;
    let sx = cw / out as f64;
    sample_grid(px.view(), out, out, |oy, ox| {
        (y0 + (oy as f64 + 0.5) * sy - 0.5, x0 + (ox as f64 + 0.5) * sx - 0.5)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn textured(h: usize, w: usize) -> Image {
        let px = Array::from_shape_fn((h, w, 3), |(y, x, c)| {
            (0.5 + 0.4 * ((x as f64 * 0.7 + y as f64 * 0.3 + c as f64).sin())).clamp(0.0, 1.0)
        });
        Image::new("t", px).unwrap()
    }

    #[test]
    fn identity_config_is_pixel_exact() {
        let img = textured(17, 17);
        for seed in 0..20 {
            let out = augment(&img, &AugmentConfig::identity(17), seed).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn standard_config_yields_output_size() {
        for (h, w) in [(224, 224), (300, 180), (64, 96)] {
            let out = augment(&textured(h, w), &AugmentConfig::standard(), 7).unwrap();
            assert_eq!(out.pixels().dim(), (224, 224, 3));
            assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let img = textured(40, 40);
        let mut cfg = AugmentConfig::standard();
        cfg.output_size = 32;
        let a = augment(&img, &cfg, 99).unwrap();
        let b = augment(&img, &cfg, 99).unwrap();
        assert_eq!(a, b);
        let c = augment(&img, &cfg, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn flip_frequency_matches_probability() {
        let draws: usize = (0..10_000u64)
            .filter(|s| Draws::sample(&AugmentConfig::standard(), *s).flip)
            .count();
        let freq = draws as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.05, "flip frequency {freq}");

        let mut cfg = AugmentConfig::standard();
        cfg.hflip_prob = 0.2;
        let draws = (0..10_000u64).filter(|s| Draws::sample(&cfg, *s).flip).count();
        assert!((draws as f64 / 10_000.0 - 0.2).abs() <= 0.05);
    }

    #[test]
    fn flip_only_mirrors_columns() {
        let mut cfg = AugmentConfig::identity(6);
        cfg.hflip_prob = 1.0;
        let sq = textured(6, 6);
        let out = augment(&sq, &cfg, 0).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(out.pixels()[[y, x, 1]], sq.pixels()[[y, 5 - x, 1]]);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let img = textured(8, 8);
        let mut cfg = AugmentConfig::standard();
        cfg.hflip_prob = 1.5;
        assert!(matches!(augment(&img, &cfg, 0), Err(Error::InvalidConfig(_))));
        let mut cfg = AugmentConfig::standard();
        cfg.crop_scale_min = 1.3;
        assert!(augment(&img, &cfg, 0).is_err());
        let mut cfg = AugmentConfig::standard();
        cfg.crop_scale_min = 0.001;
        assert!(matches!(augment(&img, &cfg, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rotation_of_constant_image_is_constant() {
        let img = Image::new("c", Array3::from_elem((12, 12, 3), 0.25)).unwrap();
        let mut cfg = AugmentConfig::identity(12);
        cfg.rotation_max_deg = 10.0;
        let out = augment(&img, &cfg, 3).unwrap();
        assert!(out.pixels().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }
}
