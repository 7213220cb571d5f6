//! USPS in the LIBSVM text layout (`usps`, `usps.t`, optionally bzip2-compressed):
//! one sample per line, `label 1:v1 2:v2 ... 256:v256`, labels 1..=10 standing
//! for digits 0..=9 and values in [-1, 1] over a 16x16 raster.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use bzip2::read::BzDecoder;

use super::resize::resize_gray;
use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::IMAGE_SIZE;

pub const USPS_SIDE: usize = 16;

pub fn file_stem(split: Split) -> &'static str {
    match split {
        Split::Train => "usps",
        Split::Test => "usps.t",
    }
}

fn locate(dir: &Path, split: Split) -> Result<PathBuf> {
    let stem = file_stem(split);
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let bz = dir.join(format!("{stem}.bz2"));
    if bz.is_file() {
        return Ok(bz);
    }
    Err(Error::ingest(bz, "archive not found (run `cgrs fetch usps` or place the file there)"))
}

fn read_text(path: &Path) -> Result<String> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    let bytes = if raw.starts_with(b"BZh") {
        let mut out = Vec::new();
        BzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::ingest(path, format!("corrupt bzip2 stream: {e}")))?;
        out
    } else {
        raw
    };
    String::from_utf8(bytes).map_err(|_| Error::ingest(path, "not UTF-8 text"))
}

/// Parses the text body into 16x16 rasters in `[0, 1]` and labels in `0..10`.
pub fn parse(text: &str, path: &Path) -> Result<(Vec<Vec<f32>>, Vec<u8>)> {
    let mut rasters = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::ingest(path, format!("line {}: {msg}", lineno + 1));
        let mut tokens = line.split_whitespace();
        let label: f64 = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("missing label".into()))?;
        let label = label.round() as i64;
        if !(1..=10).contains(&label) {
            return Err(bad(format!("label {label} outside 1..=10")));
        }
        let mut raster = vec![0.0f32; USPS_SIDE * USPS_SIDE];
        let mut seen = 0;
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| bad(format!("malformed feature '{tok}'")))?;
            let idx: usize = idx.parse().map_err(|_| bad(format!("bad index in '{tok}'")))?;
            let val: f32 = val.parse().map_err(|_| bad(format!("bad value in '{tok}'")))?;
            if idx == 0 || idx > raster.len() {
                return Err(bad(format!("feature index {idx} outside 1..=256")));
            }
            raster[idx - 1] = ((val + 1.0) / 2.0).clamp(0.0, 1.0);
            seen += 1;
        }
        if seen != raster.len() {
            return Err(bad(format!("expected 256 features, found {seen}")));
        }
        rasters.push(raster);
        labels.push((label - 1) as u8);
    }
    Ok((rasters, labels))
}

/// Loads a USPS split, resized to 28x28 with bilinear interpolation.
pub fn load_usps(dir: &Path, split: Split) -> Result<LabeledImageSet> {
    let path = locate(dir, split)?;
    let (rasters, labels) = parse(&read_text(&path)?, &path)?;
    let mut images = Vec::with_capacity(rasters.len() * IMAGE_SIZE * IMAGE_SIZE);
    for r in &rasters {
        images.extend(resize_gray(r, USPS_SIDE, USPS_SIDE, IMAGE_SIZE, IMAGE_SIZE));
    }
    LabeledImageSet::new("usps", split, 1, images, labels)
}

/// Formats a 16x16 raster (values in `[0, 1]`) and a 0-based label as one LIBSVM line.
pub fn format_line(raster: &[f32], label: u8) -> String {
    let mut s = format!("{}", label as u32 + 1);
    for (i, v) in raster.iter().enumerate() {
        s.push_str(&format!(" {}:{}", i + 1, v * 2.0 - 1.0));
    }
    s
}
