//! Seeded synthetic real/fake image generator.
//!
//! Real images are textured ellipses over a shaded background. Fake images
//! are drawn the same way and then carry a fine sinusoidal grating inside the
//! ellipse, the kind of high-frequency residue the wavelet detail bands pick
//! up. Grating amplitudes start near the noise floor so the classes overlap.
//!
//! [`FragileToy`] is a tensor-level set for attack experiments.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbones::train::TensorSet;
use crate::data::{FAKE_DIR, REAL_DIR};
use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::seeding::{rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub image_size: usize,
    pub train_real: usize,
    pub train_fake: usize,
    pub val_real: usize,
    pub val_fake: usize,
    pub seed: u64,
    /// Fake grating amplitude range in 8-bit intensity units over 255.
    pub grating_amplitude: (f64, f64),
    /// Grating period range in pixels.
    pub grating_period: (f64, f64),
    /// Per-pixel Gaussian noise added to every image.
    pub noise_std: f64,
}

impl SynthConfig {
    /// 5:1 fake-to-real split with the given totals.
    pub fn imbalanced(image_size: usize, train_total: usize, val_total: usize, seed: u64) -> Self {
        SynthConfig {
            image_size,
            train_real: train_total / 6,
            train_fake: train_total - train_total / 6,
            val_real: val_total / 6,
            val_fake: val_total - val_total / 6,
            seed,
            grating_amplitude: (0.0, 0.3),
            grating_period: (2.2, 3.6),
            noise_std: 0.03,
        }
    }

    /// The 600-image set used by the command-line smoke runs.
    pub fn small(seed: u64) -> Self {
        SynthConfig::imbalanced(32, 480, 120, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::invalid_config("synthetic images must be at least 8 px"));
        }
        let (a0, a1) = self.grating_amplitude;
        let (p0, p1) = self.grating_period;
        if !(0.0 <= a0 && a0 <= a1 && a1 <= 1.0) || !(2.0 <= p0 && p0 <= p1) || self.noise_std < 0.0 {
            return Err(Error::invalid_config("invalid synthetic grating or noise settings"));
        }
        Ok(())
    }

    pub fn counts(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (self.train_real, self.train_fake),
            Split::Val => (self.val_real, self.val_fake),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `real/<name>.png` or `fake/<name>.png`, matching on-disk layout.
    pub id: String,
    pub label: u8,
    pub image: RgbImage,
}

impl SynthSample {
    pub fn to_image(&self) -> Image {
        Image::from_rgb8(self.id.clone(), &self.image).expect("rgb8 image is valid")
    }
}

struct Scene {
    base: [f64; 3],
    gradient: [f64; 3],
    grad_dir: f64,
    centre: (f64, f64),
    axes: (f64, f64),
    angle: f64,
    fill: [f64; 3],
    // (amplitude, period, orientation, phase) per low-frequency texture wave
    waves: Vec<(f64, f64, f64, f64)>,
}

fn scene(rng: &mut impl Rng, s: f64) -> Scene {
    let mut rgb = |lo: f64, hi: f64| [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)];
    let base = rgb(0.2, 0.8);
    let gradient = rgb(-0.15, 0.15);
    let fill = rgb(0.2, 0.8);
    Scene {
        base,
        gradient,
        fill,
        grad_dir: rng.gen_range(0.0..2.0 * PI),
        centre: (rng.gen_range(0.35..0.65) * s, rng.gen_range(0.35..0.65) * s),
        axes: (rng.gen_range(0.22..0.4) * s, rng.gen_range(0.22..0.4) * s),
        angle: rng.gen_range(0.0..PI),
        waves: (0..3)
            .map(|_| {
                (
                    rng.gen_range(0.02..0.06),
                    rng.gen_range(s / 4.0..s),
                    rng.gen_range(0.0..PI),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect(),
    }
}

fn render(cfg: &SynthConfig, split: Split, label: u8, index: usize) -> RgbImage {
    let mut rng = rng_for(cfg.seed, &[tag(split.dir_name()), label as u64, index as u64]);
    let n = cfg.image_size;
    let s = n as f64;
    let sc = scene(&mut rng, s);
    // Drawn for every image so reals and fakes share the scene distribution.
    let amp = rng.gen_range(cfg.grating_amplitude.0..=cfg.grating_amplitude.1);
    let period = rng.gen_range(cfg.grating_period.0..=cfg.grating_period.1);
    let theta = rng.gen_range(0.0..PI);
    let phase = rng.gen_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).unwrap();
    let (ca, sa) = (sc.angle.cos(), sc.angle.sin());
    let (gc, gs) = (sc.grad_dir.cos(), sc.grad_dir.sin());

    let mut img = RgbImage::new(n as u32, n as u32);
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - sc.centre.0, py - sc.centre.1);
            let u = (ca * dx + sa * dy) / sc.axes.0;
            let v = (-sa * dx + ca * dy) / sc.axes.1;
            let r = (u * u + v * v).sqrt();
            // One-pixel soft edge.
            let inside = ((1.0 - r) * sc.axes.0.min(sc.axes.1)).clamp(0.0, 1.0);
            let g = ((gc * px + gs * py) / s) - 0.5;
            let texture: f64 = sc
                .waves
                .iter()
                .map(|&(a, p, o, ph)| a * (2.0 * PI * (o.cos() * px + o.sin() * py) / p + ph).sin())
                .sum();
            let grating = if label == 1 {
                amp * inside * (2.0 * PI * (theta.cos() * px + theta.sin() * py) / period + phase).sin()
            } else {
                0.0
            };
            let mut out = [0u8; 3];
            for c in 0..3 {
                let bg = sc.base[c] + sc.gradient[c] * g;
                let fg = sc.fill[c] + texture;
                let mut val = bg * (1.0 - inside) + fg * inside + grating;
                if cfg.noise_std > 0.0 {
                    val += noise.sample(&mut rng);
                }
                out[c] = (val.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(out));
        }
    }
    img
}

fn sample_id(label: u8, index: usize) -> String {
    let dir = if label == 1 { FAKE_DIR } else { REAL_DIR };
    format!("{dir}/{dir}_{index:05}.png")
}

/// All samples of a split: reals first, then fakes, each in index order.
pub fn generate_split(cfg: &SynthConfig, split: Split) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    let (reals, fakes) = cfg.counts(split);
    let mut out = Vec::with_capacity(reals + fakes);
    for (label, count) in [(0u8, reals), (1u8, fakes)] {
        for i in 0..count {
            out.push(SynthSample {
                id: sample_id(label, i),
                label,
                image: render(cfg, split, label, i),
            });
        }
    }
    Ok(out)
}

/// Writes `<root>/{train,val}/{real,fake}/*.png` plus `synth.json`.
pub fn write_dataset(cfg: &SynthConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for split in [Split::Train, Split::Val] {
        for dir in [REAL_DIR, FAKE_DIR] {
            let d = root.join(split.dir_name()).join(dir);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for sample in generate_split(cfg, split)? {
            let path = root.join(split.dir_name()).join(&sample.id);
            sample
                .image
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        }
    }
    let meta = root.join("synth.json");
    let json = serde_json::to_vec_pretty(cfg).expect("config serializes");
    fs::write(&meta, json).map_err(|e| Error::io(&meta, e))
}

/// Two balanced classes in `[n, size, size, 3]` tensors. Element 0 carries
/// the label with unit separation and Gaussian noise; every other element
/// carries it with separation `faint_shift` under much smaller noise. A linear
/// fit leans on the faint elements, which an L∞ step barely larger than
/// `faint_shift` overturns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FragileToy {
    pub size: usize,
    pub faint_shift: f64,
    pub faint_std: f64,
    pub robust_std: f64,
}

impl Default for FragileToy {
    fn default() -> Self {
        FragileToy {
            size: 32,
            faint_shift: 0.002,
            faint_std: 0.02,
            robust_std: 0.5,
        }
    }
}

impl FragileToy {
    /// `n` samples with alternating labels, starting with real.
    pub fn generate(&self, n: usize, seed: u64) -> Result<TensorSet> {
        if self.size == 0 || n == 0 || self.faint_std < 0.0 || self.robust_std < 0.0 {
            return Err(Error::invalid_config("fragile toy needs a positive size and count"));
        }
        let mut rng = rng_for(seed, &[tag("fragile-toy")]);
        let faint = Normal::new(0.0, self.faint_std).expect("finite std");
        let robust = Normal::new(0.0, self.robust_std).expect("finite std");
        let d = self.size * self.size * 3;
        let mut values = Vec::with_capacity(n * d);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        for &y in &labels {
            let sign = if y == 1 { 1.0 } else { -1.0 };
            values.push(sign + robust.sample(&mut rng));
            values.extend((1..d).map(|_| sign * self.faint_shift + faint.sample(&mut rng)));
        }
        let inputs = ArrayD::from_shape_vec(IxDyn(&[n, self.size, self.size, 3]), values).expect("shape matches");
        TensorSet::new(inputs, labels)
    }
}
