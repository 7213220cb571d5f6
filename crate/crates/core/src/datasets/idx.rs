//! IDX archives (MNIST, Fashion-MNIST), optionally gzip-compressed.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use super::{LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::IMAGE_SIZE;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn prefix(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "t10k",
    }
}

pub fn images_file_stem(split: Split) -> String {
    format!("{}-images-idx3-ubyte", prefix(split))
}

pub fn labels_file_stem(split: Split) -> String {
    format!("{}-labels-idx1-ubyte", prefix(split))
}

/// First existing of `<stem>` and `<stem>.gz` inside `dir`.
fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    let plain = dir.join(stem);
    if plain.is_file() {
        return Ok(plain);
    }
    let gz = dir.join(format!("{stem}.gz"));
    if gz.is_file() {
        return Ok(gz);
    }
    Err(Error::ingest(
        gz,
        "archive not found (run `cgrs fetch` or place the file there)",
    ))
}

/// Reads a whole file, transparently inflating gzip.
pub(crate) fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::ingest(path, format!("corrupt gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an IDX3 image file into pixels in `[0, 1]`.
pub fn parse_images(bytes: &[u8], path: &Path) -> Result<(usize, Vec<f32>)> {
    if bytes.len() < 16 || be_u32(bytes, 0) != IMAGES_MAGIC {
        return Err(Error::ingest(path, "not an IDX3 image file"));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    if rows != IMAGE_SIZE || cols != IMAGE_SIZE {
        return Err(Error::ingest(path, format!("expected 28x28 images, found {rows}x{cols}")));
    }
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(Error::ingest(
            path,
            format!("truncated: header promises {count} images, body has {} bytes", body.len()),
        ));
    }
    Ok((count, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 || be_u32(bytes, 0) != LABELS_MAGIC {
        return Err(Error::ingest(path, "not an IDX1 label file"));
    }
    let count = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::ingest(
            path,
            format!("truncated: header promises {count} labels, body has {}", body.len()),
        ));
    }
    if let Some(l) = body.iter().find(|l| **l >= 10) {
        return Err(Error::ingest(path, format!("label {l} outside [0, 10)")));
    }
    Ok(body.to_vec())
}

/// Loads `<dir>/{train,t10k}-{images,labels}` as a grayscale set.
pub fn load_idx_pair(dir: &Path, name: &str, split: Split) -> Result<LabeledImageSet> {
    let img_path = locate(dir, &images_file_stem(split))?;
    let lbl_path = locate(dir, &labels_file_stem(split))?;
    let (count, images) = parse_images(&read_maybe_gz(&img_path)?, &img_path)?;
    let labels = parse_labels(&read_maybe_gz(&lbl_path)?, &lbl_path)?;
    if labels.len() != count {
        return Err(Error::ingest(
            &lbl_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    LabeledImageSet::new(name, split, 1, images, labels)
}

/// Writes an uncompressed IDX3/IDX1 pair for a grayscale set (pixels quantized to bytes).
pub fn write_idx_pair(set: &LabeledImageSet, dir: &Path) -> Result<()> {
    if set.channels() != 1 || set.is_normalized() {
        return Err(Error::Config("IDX export needs a raw grayscale set".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut img = Vec::with_capacity(16 + set.images().len());
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(set.len() as u32).to_be_bytes());
    img.extend_from_slice(&(IMAGE_SIZE as u32).to_be_bytes());
    img.extend_from_slice(&(IMAGE_SIZE as u32).to_be_bytes());
    img.extend(set.images().iter().map(|&v| (v * 255.0).round() as u8));
    let mut lbl = Vec::with_capacity(8 + set.len());
    lbl.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(set.len() as u32).to_be_bytes());
    lbl.extend_from_slice(set.labels());
    for (stem, bytes) in [(images_file_stem(set.split), img), (labels_file_stem(set.split), lbl)] {
        let path = dir.join(stem);
        File::create(&path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
