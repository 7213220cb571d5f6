//! Background blending (MNIST-M, Fashion-M) and background patch sources.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::IMAGE_SIZE;

const PATCH_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * 3;

/// Random stream for one sample. Streams are keyed by sample index, so results
/// do not depend on how the work is split across threads.
pub(crate) fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// RGB 28x28 patches with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundPatchSet {
    pub source: String,
    patches: Vec<f32>,
}

impl BackgroundPatchSet {
    pub fn new(source: impl Into<String>, patches: Vec<f32>) -> Result<Self> {
        if !patches.len().is_multiple_of(PATCH_LEN) {
            return Err(Error::Data(format!(
                "background buffer of {} values is not a whole number of 28x28x3 patches",
                patches.len()
            )));
        }
        if let Some(v) = patches.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("background value {v} outside [0, 1]")));
        }
        Ok(BackgroundPatchSet {
            source: source.into(),
            patches,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len() / PATCH_LEN
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn patch(&self, index: usize) -> &[f32] {
        &self.patches[index * PATCH_LEN..(index + 1) * PATCH_LEN]
    }

    /// Seeded colored value-noise textures, for runs without a background archive.
    pub fn procedural(count: usize, seed: u64) -> Self {
        let patches: Vec<f32> = (0..count)
            .into_par_iter()
            .flat_map_iter(|i| procedural_patch(&mut sample_rng(seed, i)))
            .collect();
        BackgroundPatchSet {
            source: format!("procedural(seed={seed})"),
            patches,
        }
    }

    /// Random 28x28 crops from every JPEG/PNG found (recursively) under `dir`.
    pub fn from_image_dir(dir: &Path, count: usize, seed: u64) -> Result<Self> {
        let mut files = Vec::new();
        collect_images(dir, &mut files)?;
        files.sort();
        if files.is_empty() {
            return Err(Error::ingest(dir, "no .jpg/.jpeg/.png background images found"));
        }
        let images = files
            .par_iter()
            .map(|p| {
                image::open(p)
                    .map(|img| img.to_rgb8())
                    .map_err(|e| Error::ingest(p, format!("cannot decode image: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = Self::from_images(&images, count, seed)?;
        set.source = dir.display().to_string();
        Ok(set)
    }

    pub fn from_images(images: &[image::RgbImage], count: usize, seed: u64) -> Result<Self> {
        if let Some(small) = images
            .iter()
            .find(|im| (im.width() as usize) < IMAGE_SIZE || (im.height() as usize) < IMAGE_SIZE)
        {
            return Err(Error::Data(format!(
                "background image of {}x{} is smaller than 28x28",
                small.width(),
                small.height()
            )));
        }
        if images.is_empty() {
            return Err(Error::Config("no background images given".into()));
        }
        let patches: Vec<f32> = (0..count)
            .into_par_iter()
            .flat_map_iter(|i| {
                let mut rng = sample_rng(seed, i);
                let img = &images[rng.gen_range(0..images.len())];
                let x0 = rng.gen_range(0..=img.width() as usize - IMAGE_SIZE);
                let y0 = rng.gen_range(0..=img.height() as usize - IMAGE_SIZE);
                let mut patch = Vec::with_capacity(PATCH_LEN);
                for y in 0..IMAGE_SIZE {
                    for x in 0..IMAGE_SIZE {
                        let px = img.get_pixel((x0 + x) as u32, (y0 + y) as u32);
                        patch.extend(px.0.iter().map(|&c| c as f32 / 255.0));
                    }
                }
                patch
            })
            .collect();
        Ok(BackgroundPatchSet {
            source: "images".into(),
            patches,
        })
    }
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            if matches!(ext.to_ascii_lowercase().as_str(), "jpg" | "jpeg" | "png") {
                out.push(path);
            }
        }
    }
    Ok(())
}

fn procedural_patch(rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = IMAGE_SIZE;
    let tint: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let mut channels = [vec![0f32; n * n], vec![0f32; n * n], vec![0f32; n * n]];
    for (cells, weight) in [(3usize, 0.5f32), (5, 0.3), (9, 0.2)] {
        for ch in channels.iter_mut() {
            let lattice: Vec<f32> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen()).collect();
            let at = |i: usize, j: usize| lattice[i * (cells + 1) + j];
            for y in 0..n {
                let fy = y as f32 / (n - 1) as f32 * cells as f32;
                let (iy, ty) = split_cell(fy, cells);
                for x in 0..n {
                    let fx = x as f32 / (n - 1) as f32 * cells as f32;
                    let (ix, tx) = split_cell(fx, cells);
                    let top = lerp(at(iy, ix), at(iy, ix + 1), tx);
                    let bottom = lerp(at(iy + 1, ix), at(iy + 1, ix + 1), tx);
                    ch[y * n + x] += weight * lerp(top, bottom, ty);
                }
            }
        }
    }
    let channels = &channels;
    (0..n * n)
        .flat_map(|p| (0..3).map(move |c| ((tint[c] + channels[c][p]) * 0.5).clamp(0.0, 1.0)))
        .collect()
}

fn split_cell(f: f32, cells: usize) -> (usize, f32) {
    let i = (f.floor() as usize).min(cells - 1);
    let t = f - i as f32;
    // smoothstep fade
    (i, t * t * (3.0 - 2.0 * t))
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Blends every grayscale image onto a randomly chosen background patch:
/// `out[c] = |background[c] - base|` per pixel and channel. Labels are kept.
pub fn blend_background(
    base: &LabeledImageSet,
    backgrounds: &BackgroundPatchSet,
    seed: u64,
) -> Result<LabeledImageSet> {
    if backgrounds.is_empty() {
        return Err(Error::Config("background patch set is empty".into()));
    }
    if base.channels() != 1 || base.is_normalized() {
        return Err(Error::Config(format!(
            "{}: blending needs a raw grayscale base set",
            base.name
        )));
    }
    let images: Vec<f32> = (0..base.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut rng = sample_rng(seed, i);
            let patch = backgrounds.patch(rng.gen_range(0..backgrounds.len()));
            let digit = base.image(i);
            let mut out = Vec::with_capacity(PATCH_LEN);
            for (p, &fg) in digit.iter().enumerate() {
                for c in 0..3 {
                    out.push((patch[p * 3 + c] - fg).abs());
                }
            }
            out
        })
        .collect();
    LabeledImageSet::new(
        format!("{}-blend", base.name),
        base.split,
        3,
        images,
        base.labels().to_vec(),
    )
}
