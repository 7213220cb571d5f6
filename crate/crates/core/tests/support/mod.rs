//! Procedural glyph digits written in the benchmark file formats, so tests
//! can run the real loaders without network access.

#![allow(dead_code)]

use std::path::Path;

use cgrs::datasets::usps::{file_stem, format_line};
use cgrs::datasets::{idx, LabeledImageSet, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 5x7 bitmap font, one row per byte (low five bits, MSB = left).
const FONT: [[u8; 7]; 10] = [
    [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
    [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
    [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
    [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
    [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
    [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
    [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
    [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
    [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
    [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
];

/// Renders `digit` into a `side`×`side` raster with cell size `cell`, offset
/// (`dx`, `dy`) and stroke intensity `ink`, plus uniform noise.
#[allow(clippy::too_many_arguments)]
pub fn glyph(digit: u8, side: usize, cell: usize, dx: i32, dy: i32, ink: f32, noise: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let mut out = vec![0f32; side * side];
    let (w, h) = (5 * cell as i32, 7 * cell as i32);
    let ox = (side as i32 - w) / 2 + dx;
    let oy = (side as i32 - h) / 2 + dy;
    for (r, bits) in FONT[digit as usize].iter().enumerate() {
        for c in 0..5 {
            if bits & (0x10 >> c) == 0 {
                continue;
            }
            for yy in 0..cell {
                for xx in 0..cell {
                    let x = ox + (c * cell + xx) as i32;
                    let y = oy + (r * cell + yy) as i32;
                    if (0..side as i32).contains(&x) && (0..side as i32).contains(&y) {
                        out[y as usize * side + x as usize] = ink;
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v = (*v + rng.gen_range(0.0..=noise)).clamp(0.0, 1.0);
    }
    out
}

/// MNIST-like: 28×28, cell 3, jittered position and ink.
pub fn mnist_like(n: usize, split: Split, seed: u64) -> LabeledImageSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let d = (i % 10) as u8;
        let (dx, dy) = (rng.gen_range(-2..=2), rng.gen_range(-2..=2));
        let ink = rng.gen_range(0.8..1.0);
        images.extend(glyph(d, 28, 3, dx, dy, ink, 0.1, &mut rng));
        labels.push(d);
    }
    LabeledImageSet::new("mnist", split, 1, images, labels).unwrap()
}

/// USPS-like raw rasters: 16×16, cell 2, heavier noise.
pub fn usps_rasters(n: usize, seed: u64) -> Vec<(Vec<f32>, u8)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let d = (i % 10) as u8;
            let (dx, dy) = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
            (glyph(d, 16, 2, dx, dy, 1.0, 0.25, &mut rng), d)
        })
        .collect()
}

/// Writes MNIST and Fashion (IDX) and USPS (LIBSVM text) train/test files
/// under `root`. The Fashion stand-in reuses the glyphs with another seed.
pub fn write_corpus(root: &Path, train: usize, test: usize, seed: u64) {
    for (split, n, s) in [(Split::Train, train, seed), (Split::Test, test, seed + 1)] {
        idx::write_idx_pair(&mnist_like(n, split, s), &root.join("mnist")).unwrap();
        idx::write_idx_pair(&mnist_like(n, split, s + 50), &root.join("fashion")).unwrap();
        let dir = root.join("usps");
        std::fs::create_dir_all(&dir).unwrap();
        let text: String = usps_rasters(n, s + 100)
            .iter()
            .map(|(r, l)| format_line(r, *l) + "\n")
            .collect();
        std::fs::write(dir.join(file_stem(split)), text).unwrap();
    }
}
