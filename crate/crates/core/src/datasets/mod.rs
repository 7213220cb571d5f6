//! Benchmark ingestion and synthesis.
//!
//! Raw archives live under a dataset root (see [`fetch`]):
//!
//! ```text
//! <root>/mnist/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! <root>/fashion/{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]
//! <root>/usps/usps[.bz2], <root>/usps/usps.t[.bz2]
//! <root>/bsds/**.jpg                        (optional, MNIST-M / Fashion-M backgrounds)
//! <root>/cache/<name>-<split>/              (synthesized sets, see [`cache`])
//! ```
//!
//! The derived sets (MNIST-M, Fashion-M, M-Digits) are read from the cache when
//! present and otherwise synthesized from their base set with
//! [`DEFAULT_SYNTH_SEED`].

pub mod cache;
pub mod fetch;
pub mod idx;
pub mod mdigits;
pub mod resize;
pub mod synth;
pub mod usps;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::{IMAGE_SIZE, NUM_CLASSES};

pub use mdigits::{compose_m_digits, compose_m_digits_traced, Composite};
pub use synth::{blend_background, BackgroundPatchSet};

/// Seed used when a derived dataset has to be synthesized on demand.
pub const DEFAULT_SYNTH_SEED: u64 = 20_190_101;
/// Background patches cropped for on-demand MNIST-M / Fashion-M synthesis.
pub const DEFAULT_BACKGROUND_PATCHES: usize = 20_000;

const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Mnist,
    MnistM,
    Usps,
    MDigits,
    Fashion,
    FashionM,
}

impl DatasetId {
    pub const ALL: [DatasetId; 6] = [
        DatasetId::Mnist,
        DatasetId::MnistM,
        DatasetId::Usps,
        DatasetId::MDigits,
        DatasetId::Fashion,
        DatasetId::FashionM,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::MnistM => "mnist-m",
            DatasetId::Usps => "usps",
            DatasetId::MDigits => "m-digits",
            DatasetId::Fashion => "fashion",
            DatasetId::FashionM => "fashion-m",
        }
    }

    /// Channels of the set as stored (before preprocessing).
    pub fn native_channels(self) -> usize {
        match self {
            DatasetId::MnistM | DatasetId::FashionM => 3,
            _ => 1,
        }
    }

    /// Base set and kind of synthesis for the derived datasets.
    pub fn derivation(self) -> Option<(DatasetId, Derivation)> {
        match self {
            DatasetId::MnistM => Some((DatasetId::Mnist, Derivation::Blend)),
            DatasetId::FashionM => Some((DatasetId::Fashion, Derivation::Blend)),
            DatasetId::MDigits => Some((DatasetId::Mnist, Derivation::MultiDigit)),
            _ => None,
        }
    }

    pub fn is_fashion(self) -> bool {
        matches!(self, DatasetId::Fashion | DatasetId::FashionM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivation {
    Blend,
    MultiDigit,
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        DatasetId::ALL
            .into_iter()
            .find(|d| d.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown dataset '{s}' (expected one of mnist, mnist-m, usps, m-digits, fashion, fashion-m)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" | "t10k" => Ok(Split::Test),
            other => config_err(format!("unknown split '{other}' (expected train or test)")),
        }
    }
}

/// A labeled 28x28 image set, stored row-major as (count, height, width, channels).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub name: String,
    pub split: Split,
    channels: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
    normalized: bool,
}

impl LabeledImageSet {
    /// Builds a set of raw pixels in `[0, 1]`.
    pub fn new(
        name: impl Into<String>,
        split: Split,
        channels: usize,
        images: Vec<f32>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let set = LabeledImageSet {
            name: name.into(),
            split,
            channels,
            images,
            labels,
            normalized: false,
        };
        set.check_shape()?;
        if let Some(v) = set.images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!(
                "{}: pixel value {v} outside [0, 1]",
                set.name
            )));
        }
        Ok(set)
    }

    fn check_shape(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return config_err(format!("{}: unsupported channel count {}", self.name, self.channels));
        }
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(Error::Data(format!(
                "{}: {} pixel values do not match {} labels of {}x{}x{}",
                self.name,
                self.images.len(),
                self.labels.len(),
                IMAGE_SIZE,
                IMAGE_SIZE,
                self.channels
            )));
        }
        if let Some(l) = self.labels.iter().find(|l| **l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("{}: label {l} outside [0, 10)", self.name)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Values per image.
    pub fn image_len(&self) -> usize {
        PIXELS * self.channels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// True once [`preprocess`] has rescaled the pixels to `[-1, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// The first `n` samples (or all of them).
    pub fn truncated(&self, n: usize) -> LabeledImageSet {
        let n = n.min(self.len());
        LabeledImageSet {
            name: self.name.clone(),
            split: self.split,
            channels: self.channels,
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            normalized: self.normalized,
        }
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledImageSet {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        LabeledImageSet {
            name: self.name.clone(),
            split: self.split,
            channels: self.channels,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            normalized: self.normalized,
        }
    }

    /// Drops the labels. Training only ever sees the target domain through this.
    pub fn unlabeled(&self) -> ImagePool {
        ImagePool {
            name: self.name.clone(),
            channels: self.channels,
            images: self.images.clone(),
            normalized: self.normalized,
        }
    }

    /// Up to `per_class` samples of every class, taken in index order.
    pub fn per_class_subset(&self, per_class: usize) -> LabeledImageSet {
        let mut taken = [0usize; NUM_CLASSES];
        let indices: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = self.labels[i] as usize;
                if taken[c] < per_class {
                    taken[c] += 1;
                    true
                } else {
                    false
                }
            })
            .collect();
        self.select(&indices)
    }
}

/// Images without labels: the form in which the target domain reaches training.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePool {
    pub name: String,
    channels: usize,
    images: Vec<f32>,
    normalized: bool,
}

impl ImagePool {
    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn image_len(&self) -> usize {
        PIXELS * self.channels
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }
}

/// Rescales pixels from `[0, 1]` to `[-1, 1]` and optionally replicates a
/// grayscale set to three channels.
pub fn preprocess(set: &LabeledImageSet, target_channels: usize) -> Result<LabeledImageSet> {
    if set.normalized {
        return config_err(format!("{}: set is already preprocessed", set.name));
    }
    if let Some(v) = set.images.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return config_err(format!(
            "{}: pixel value {v} outside [0, 1]; preprocess expects raw pixels",
            set.name
        ));
    }
    let rescale = |v: f32| v * 2.0 - 1.0;
    let images = match (set.channels, target_channels) {
        (a, b) if a == b => set.images.iter().map(|&v| rescale(v)).collect(),
        (1, 3) => set
            .images
            .iter()
            .flat_map(|&v| {
                let r = rescale(v);
                [r, r, r]
            })
            .collect(),
        (a, b) => {
            return config_err(format!(
                "{}: cannot convert {a} channels to {b} (only identity and 1 -> 3 replication)",
                set.name
            ))
        }
    };
    Ok(LabeledImageSet {
        name: set.name.clone(),
        split: set.split,
        channels: target_channels,
        images,
        labels: set.labels.clone(),
        normalized: true,
    })
}

/// Loads a benchmark split from `root`.
///
/// MNIST / Fashion / USPS come from their raw archives. Derived sets come from
/// `<root>/cache` when present, otherwise they are synthesized from the base set
/// with [`DEFAULT_SYNTH_SEED`] (BSDS backgrounds if `<root>/bsds` exists, else
/// the procedural fallback).
pub fn load_dataset(id: DatasetId, split: Split, root: &Path) -> Result<LabeledImageSet> {
    match id {
        DatasetId::Mnist => idx::load_idx_pair(&root.join("mnist"), id.as_str(), split),
        DatasetId::Fashion => idx::load_idx_pair(&root.join("fashion"), id.as_str(), split),
        DatasetId::Usps => usps::load_usps(&root.join("usps"), split),
        DatasetId::MnistM | DatasetId::FashionM | DatasetId::MDigits => {
            let dir = cache::cache_dir(root, id, split);
            if dir.join(cache::MANIFEST_FILE).exists() {
                return cache::read_cache(&dir);
            }
            log::info!("no cached {id}/{split} under {}; synthesizing", root.display());
            synthesize(id, split, root, DEFAULT_SYNTH_SEED, None)
        }
    }
}

/// Synthesizes a derived dataset from its base set.
pub fn synthesize(
    id: DatasetId,
    split: Split,
    root: &Path,
    seed: u64,
    backgrounds_dir: Option<&Path>,
) -> Result<LabeledImageSet> {
    let (base_id, derivation) = id
        .derivation()
        .ok_or_else(|| Error::Config(format!("{id} is not a synthesized dataset")))?;
    let base = load_dataset(base_id, split, root)?;
    // Distinct streams for train and test so the two splits never share patches.
    let split_seed = seed.wrapping_mul(2).wrapping_add(matches!(split, Split::Test) as u64);
    let mut out = match derivation {
        Derivation::Blend => {
            let default_dir = root.join("bsds");
            let dir: Option<PathBuf> = match backgrounds_dir {
                Some(d) => Some(d.to_path_buf()),
                None if default_dir.is_dir() => Some(default_dir),
                None => None,
            };
            let patches = match dir {
                Some(d) => BackgroundPatchSet::from_image_dir(&d, DEFAULT_BACKGROUND_PATCHES, split_seed)?,
                None => {
                    log::warn!("no background images found; using procedural textures");
                    BackgroundPatchSet::procedural(DEFAULT_BACKGROUND_PATCHES, split_seed)
                }
            };
            blend_background(&base, &patches, split_seed)?
        }
        Derivation::MultiDigit => compose_m_digits(&base, split_seed)?,
    };
    out.name = id.as_str().to_string();
    Ok(out)
}
