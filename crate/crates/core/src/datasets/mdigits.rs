//! M-Digits: one to three MNIST digits cropped, laid out side by side and
//! resized back to 28x28. The label is the central digit's label.
//!
//! Layout: each digit is cropped to its bounding box; digits go left to right
//! with a random 0..=2 pixel gap, vertically centered with ±2 pixel jitter,
//! on a square canvas with a 2 pixel margin, which is then resized. For two
//! digits the left one counts as central.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use super::resize::resize_gray;
use super::synth::sample_rng;
use super::LabeledImageSet;
use crate::error::{Error, Result};
use crate::IMAGE_SIZE;

pub const MAX_DIGITS: usize = 3;
const MAX_GAP: usize = 2;
const MAX_JITTER: i64 = 2;
const MARGIN: usize = 2;

/// How one composite was built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Composite {
    /// Base-set indices, left to right.
    pub members: Vec<usize>,
    /// Position in `members` of the digit that decides the label.
    pub center: usize,
}

/// Index of the central digit among `n` laid-out digits.
pub fn central_position(n: usize) -> usize {
    (n.max(1) - 1) / 2
}

struct Crop {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

fn crop_to_content(img: &[f32]) -> Crop {
    let n = IMAGE_SIZE;
    let (mut x0, mut y0, mut x1, mut y1) = (n, n, 0, 0);
    for y in 0..n {
        for x in 0..n {
            if img[y * n + x] > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    if x0 >= x1 {
        // blank image: keep the full frame
        return Crop {
            width: n,
            height: n,
            pixels: img.to_vec(),
        };
    }
    let (width, height) = (x1 - x0, y1 - y0);
    let mut pixels = Vec::with_capacity(width * height);
    for y in y0..y1 {
        pixels.extend_from_slice(&img[y * n + x0..y * n + x1]);
    }
    Crop {
        width,
        height,
        pixels,
    }
}

fn compose_one(base: &LabeledImageSet, seed: u64, index: usize) -> (Vec<f32>, Composite) {
    let mut rng = sample_rng(seed, index);
    let count = rng.gen_range(1..=MAX_DIGITS.min(base.len()));
    let members = sample(&mut rng, base.len(), count).into_vec();
    let crops: Vec<Crop> = members.iter().map(|&m| crop_to_content(base.image(m))).collect();
    let gaps: Vec<usize> = (1..count).map(|_| rng.gen_range(0..=MAX_GAP)).collect();

    let total_width: usize = crops.iter().map(|c| c.width).sum::<usize>() + gaps.iter().sum::<usize>();
    let max_height = crops.iter().map(|c| c.height).max().unwrap_or(0);
    let side = total_width.max(max_height + 2 * MAX_JITTER as usize) + 2 * MARGIN;
    let mut canvas = vec![0f32; side * side];

    let mut x = (side - total_width) / 2;
    for (k, crop) in crops.iter().enumerate() {
        let jitter = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
        let centered = (side - crop.height) as i64 / 2 + jitter;
        let y = centered.clamp(0, (side - crop.height) as i64) as usize;
        for row in 0..crop.height {
            for col in 0..crop.width {
                let dst = &mut canvas[(y + row) * side + x + col];
                *dst = dst.max(crop.pixels[row * crop.width + col]);
            }
        }
        x += crop.width + gaps.get(k).copied().unwrap_or(0);
    }
    let image = resize_gray(&canvas, side, side, IMAGE_SIZE, IMAGE_SIZE);
    let center = central_position(count);
    (image, Composite { members, center })
}

/// Builds one composite per base sample, also returning how each was built.
pub fn compose_m_digits_traced(
    base: &LabeledImageSet,
    seed: u64,
) -> Result<(LabeledImageSet, Vec<Composite>)> {
    if base.is_empty() {
        return Err(Error::Config("M-Digits needs a non-empty base set".into()));
    }
    if base.channels() != 1 || base.is_normalized() {
        return Err(Error::Config(format!(
            "{}: M-Digits needs a raw grayscale base set",
            base.name
        )));
    }
    let built: Vec<(Vec<f32>, Composite)> = (0..base.len())
        .into_par_iter()
        .map(|i| compose_one(base, seed, i))
        .collect();
    let mut images = Vec::with_capacity(base.len() * IMAGE_SIZE * IMAGE_SIZE);
    let mut labels = Vec::with_capacity(base.len());
    let mut layouts = Vec::with_capacity(base.len());
    for (img, layout) in built {
        images.extend(img);
        labels.push(base.label(layout.members[layout.center]));
        layouts.push(layout);
    }
    let set = LabeledImageSet::new("m-digits", base.split, 1, images, labels)?;
    Ok((set, layouts))
}

pub fn compose_m_digits(base: &LabeledImageSet, seed: u64) -> Result<LabeledImageSet> {
    compose_m_digits_traced(base, seed).map(|(set, _)| set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Split;

    /// Ten distinct blobs: digit `d` is a filled box whose width grows with `d`.
    fn blobs(n: usize) -> LabeledImageSet {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let d = i % 10;
            let mut img = vec![0f32; 784];
            for y in 6..22 {
                for x in 10..(12 + d) {
                    img[y * 28 + x] = 1.0;
                }
            }
            images.extend(img);
            labels.push(d as u8);
        }
        LabeledImageSet::new("mnist", Split::Train, 1, images, labels).unwrap()
    }

    #[test]
    fn central_position_rule() {
        assert_eq!(central_position(1), 0);
        assert_eq!(central_position(2), 0);
        assert_eq!(central_position(3), 1);
    }

    #[test]
    fn labels_follow_the_central_digit() {
        let base = blobs(50);
        let (set, layouts) = compose_m_digits_traced(&base, 7).unwrap();
        assert_eq!(set.len(), 50);
        for (i, l) in layouts.iter().enumerate() {
            assert!((1..=3).contains(&l.members.len()));
            assert_eq!(l.center, central_position(l.members.len()));
            assert_eq!(set.label(i), base.label(l.members[l.center]));
        }
        // all three digit counts occur
        for n in 1..=3 {
            assert!(layouts.iter().any(|l| l.members.len() == n));
        }
    }

    #[test]
    fn output_is_28_by_28_and_deterministic() {
        let base = blobs(20);
        let a = compose_m_digits(&base, 3).unwrap();
        let b = compose_m_digits(&base, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.image_len(), 784);
        assert!(a.images().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, compose_m_digits(&base, 4).unwrap());
    }

    #[test]
    fn empty_base_is_rejected() {
        let base = LabeledImageSet::new("mnist", Split::Train, 1, vec![], vec![]).unwrap();
        assert!(matches!(compose_m_digits(&base, 0), Err(Error::Config(_))));
    }
}
