//! Dataset layout, in-memory image stores and per-backbone preprocessing.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::Array3;

use crate::backbones::train::TensorSet;
use crate::backbones::{InputSpec, Preprocess};
use crate::error::{Error, Result};
use crate::imagecore::{self, augment, AugmentConfig, Image, NormalizationStats};
use crate::wavelet;

pub const REAL_DIR: &str = "real";
pub const FAKE_DIR: &str = "fake";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    /// Path relative to the split directory, e.g. `fake/x.png`.
    pub id: String,
    pub path: PathBuf,
    pub label: u8,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Lists `<root>/<split>/{real,fake}/*` sorted by id.
pub fn scan_split(root: &Path, split: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (dir, label) in [(REAL_DIR, 0u8), (FAKE_DIR, 1u8)] {
        let d = root.join(split).join(dir);
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if !is_image(&path) {
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            out.push(Sample {
                id: format!("{dir}/{name}"),
                path,
                label,
            });
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

/// Decoded images keyed by sample id.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: IndexMap<String, (Image, u8)>,
}

impl ImageStore {
    pub fn from_images(items: impl IntoIterator<Item = (Image, u8)>) -> Self {
        ImageStore {
            images: items.into_iter().map(|(img, y)| (img.id().to_string(), (img, y))).collect(),
        }
    }

    /// Decodes every sample at `size × size`.
    pub fn load(samples: &[Sample], size: usize) -> Result<Self> {
        let mut images = IndexMap::with_capacity(samples.len());
        for s in samples {
            let img = imagecore::load_image(&s.path, size)?;
            let img = Image::new(s.id.clone(), img.into_pixels())?;
            images.insert(s.id.clone(), (img, s.label));
        }
        Ok(ImageStore { images })
    }

    pub fn get(&self, id: &str) -> Result<&(Image, u8)> {
        self.images
            .get(id)
            .ok_or_else(|| Error::invalid_input(format!("unknown sample id {id}")))
    }

    pub fn ids_with_label(&self, label: u8) -> Vec<String> {
        self.images
            .iter()
            .filter(|(_, (_, y))| *y == label)
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Every `(id, label)` in insertion order.
    pub fn entries(&self) -> Vec<(String, u8)> {
        self.images.iter().map(|(id, (_, y))| (id.clone(), *y)).collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Turns images into the normalized tensors a backbone expects.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub spec: InputSpec,
    pub stats: NormalizationStats,
    pub augment: Option<AugmentConfig>,
}

impl Preprocessor {
    pub fn new(spec: InputSpec, augment: Option<AugmentConfig>) -> Result<Self> {
        if spec.height != spec.width {
            return Err(Error::invalid_config("square inputs only"));
        }
        if let Some(a) = &augment {
            a.validate()?;
        }
        Ok(Preprocessor {
            spec,
            stats: NormalizationStats::imagenet(),
            augment,
        })
    }

    /// One sample; `aug_seed` selects the augmentation draw and is ignored
    /// when augmentation is off.
    pub fn tensor(&self, img: &Image, aug_seed: Option<u64>) -> Result<Array3<f64>> {
        let size = self.spec.height;
        let img = match (&self.augment, aug_seed) {
            (Some(cfg), Some(seed)) => augment(
                img,
                &AugmentConfig {
                    output_size: size,
                    ..cfg.clone()
                },
                seed,
            )?,
            _ if img.height() == size && img.width() == size => img.clone(),
            _ => img.resized(size, size)?,
        };
        let img = match self.spec.preprocess {
            Preprocess::Plain => img,
            Preprocess::Wavelet => wavelet::wavelet_feature_image(&img, size)?,
        };
        imagecore::normalize(&img, &self.stats)
    }

    /// Stacks `entries` from `store`; `seed_of(i)` gives the augmentation
    /// seed of the i-th entry.
    pub fn batch(
        &self,
        store: &ImageStore,
        entries: &[(String, u8)],
        seed_of: impl Fn(usize) -> Option<u64>,
    ) -> Result<TensorSet> {
        let samples = entries
            .iter()
            .enumerate()
            .map(|(i, (id, y))| Ok((self.tensor(&store.get(id)?.0, seed_of(i))?, *y)))
            .collect::<Result<Vec<_>>>()?;
        TensorSet::from_samples(samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{write_dataset, SynthConfig};

    fn spec(pre: Preprocess) -> InputSpec {
        InputSpec {
            height: 32,
            width: 32,
            channels: 3,
            preprocess: pre,
        }
    }

    #[test]
    fn scan_and_load_synthetic_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            train_real: 2,
            train_fake: 3,
            val_real: 1,
            val_fake: 1,
            ..SynthConfig::small(1)
        };
        write_dataset(&cfg, dir.path()).unwrap();
        let train = scan_split(dir.path(), "train").unwrap();
        assert_eq!(train.len(), 5);
        assert_eq!(train.iter().filter(|s| s.label == 1).count(), 3);
        assert!(train.windows(2).all(|w| w[0].id < w[1].id));
        let store = ImageStore::load(&train, 32).unwrap();
        assert_eq!(store.ids_with_label(0).len(), 2);
        let pre = Preprocessor::new(spec(Preprocess::Wavelet), None).unwrap();
        let set = pre.batch(&store, &store.entries(), |_| None).unwrap();
        assert_eq!(set.inputs.shape(), &[5, 32, 32, 3]);
    }

    #[test]
    fn missing_split_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(scan_split(dir.path(), "train"), Err(Error::Io { .. })));
    }

    #[test]
    fn augmentation_is_seeded_and_optional() {
        let img = Image::new("a", Array3::from_shape_fn((40, 40, 3), |(y, x, c)| ((x + 2 * y + c) % 17) as f64 / 16.0)).unwrap();
        let plain = Preprocessor::new(spec(Preprocess::Plain), None).unwrap();
        let aug = Preprocessor::new(spec(Preprocess::Plain), Some(AugmentConfig::standard())).unwrap();
        assert_eq!(plain.tensor(&img, Some(3)).unwrap(), plain.tensor(&img, None).unwrap());
        assert_eq!(aug.tensor(&img, Some(3)).unwrap(), aug.tensor(&img, Some(3)).unwrap());
        assert_ne!(aug.tensor(&img, Some(3)).unwrap(), aug.tensor(&img, Some(4)).unwrap());
        assert_eq!(aug.tensor(&img, Some(3)).unwrap().dim(), (32, 32, 3));
    }
}
