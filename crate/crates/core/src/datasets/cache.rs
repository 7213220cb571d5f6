//! On-disk dataset cache.
//!
//! One directory per dataset split holding three files:
//!
//! ```text
//! images.bin   b"CGRSIMG1" | count u32 | height u32 | width u32 | channels u32 | f32 pixels
//! labels.bin   b"CGRSLBL1" | count u32 | u8 labels
//! manifest.json {format_version, name, split, count, channels, height, width, digest}
//! ```
//!
//! All integers and floats are little-endian; pixels are row-major
//! (count, height, width, channels) in `[0, 1]`. `digest` is the hex SHA-256 of
//! the bytes of `images.bin` followed by those of `labels.bin`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetId, LabeledImageSet, Split};
use crate::error::{Error, Result};
use crate::IMAGE_SIZE;

pub const IMAGES_FILE: &str = "images.bin";
pub const LABELS_FILE: &str = "labels.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CACHE_FORMAT_VERSION: u32 = 1;

const IMAGES_MAGIC: &[u8; 8] = b"CGRSIMG1";
const LABELS_MAGIC: &[u8; 8] = b"CGRSLBL1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub split: Split,
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub digest: String,
}

pub fn cache_dir(root: &Path, id: DatasetId, split: Split) -> PathBuf {
    root.join("cache").join(format!("{id}-{split}"))
}

fn encode(set: &LabeledImageSet) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(24 + set.images().len() * 4);
    images.extend_from_slice(IMAGES_MAGIC);
    for v in [set.len(), IMAGE_SIZE, IMAGE_SIZE, set.channels()] {
        images.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in set.images() {
        images.extend_from_slice(&v.to_le_bytes());
    }
    let mut labels = Vec::with_capacity(12 + set.len());
    labels.extend_from_slice(LABELS_MAGIC);
    labels.extend_from_slice(&(set.len() as u32).to_le_bytes());
    labels.extend_from_slice(set.labels());
    (images, labels)
}

fn digest_of(images: &[u8], labels: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(images);
    h.update(labels);
    hex::encode(h.finalize())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    std::io::Write::write_all(&mut tmp, bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes `set` (raw pixels only) into `dir` and returns its manifest.
pub fn write_cache(set: &LabeledImageSet, dir: &Path) -> Result<Manifest> {
    if set.is_normalized() {
        return Err(Error::Config("only raw [0, 1] sets are cached".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (images, labels) = encode(set);
    let manifest = Manifest {
        format_version: CACHE_FORMAT_VERSION,
        name: set.name.clone(),
        split: set.split,
        count: set.len(),
        channels: set.channels(),
        height: IMAGE_SIZE,
        width: IMAGE_SIZE,
        digest: digest_of(&images, &labels),
    };
    write_file(&dir.join(IMAGES_FILE), &images)?;
    write_file(&dir.join(LABELS_FILE), &labels)?;
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::ingest(&path, format!("bad manifest: {e}")))
}

fn le_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

/// Reads and verifies a cached set.
pub fn read_cache(dir: &Path) -> Result<LabeledImageSet> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != CACHE_FORMAT_VERSION {
        return Err(Error::ingest(
            dir.join(MANIFEST_FILE),
            format!("unsupported cache format version {}", manifest.format_version),
        ));
    }
    let img_path = dir.join(IMAGES_FILE);
    let lbl_path = dir.join(LABELS_FILE);
    let images = std::fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?;
    let labels = std::fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?;
    if digest_of(&images, &labels) != manifest.digest {
        return Err(Error::Integrity(format!(
            "{}: cached files do not match the manifest digest",
            dir.display()
        )));
    }
    if images.len() < 24 || &images[..8] != IMAGES_MAGIC {
        return Err(Error::ingest(&img_path, "bad images header"));
    }
    if labels.len() < 12 || &labels[..8] != LABELS_MAGIC {
        return Err(Error::ingest(&lbl_path, "bad labels header"));
    }
    let count = le_u32(&images, 8);
    let (h, w, c) = (le_u32(&images, 12), le_u32(&images, 16), le_u32(&images, 20));
    if h != IMAGE_SIZE || w != IMAGE_SIZE || count != manifest.count || c != manifest.channels {
        return Err(Error::ingest(&img_path, "header disagrees with manifest"));
    }
    let body = &images[24..];
    if body.len() != count * h * w * c * 4 || le_u32(&labels, 8) != count || labels.len() != 12 + count {
        return Err(Error::ingest(&img_path, "payload size disagrees with header"));
    }
    let pixels = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    LabeledImageSet::new(manifest.name, manifest.split, c, pixels, labels[12..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set() -> LabeledImageSet {
        let images: Vec<f32> = (0..2 * 784 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        LabeledImageSet::new("mnist-m", Split::Test, 3, images, vec![7, 2]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_cache(&set(), dir.path()).unwrap();
        assert_eq!(m.count, 2);
        assert_eq!(m.channels, 3);
        assert_eq!(read_cache(dir.path()).unwrap(), set());
    }

    #[test]
    fn identical_sets_give_identical_manifests() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(write_cache(&set(), a.path()).unwrap(), write_cache(&set(), b.path()).unwrap());
        assert_eq!(
            std::fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
            std::fs::read(b.path().join(MANIFEST_FILE)).unwrap()
        );
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_cache(&set(), dir.path()).unwrap();
        let p = dir.path().join(LABELS_FILE);
        let mut bytes = std::fs::read(&p).unwrap();
        *bytes.last_mut().unwrap() = 5;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_cache(dir.path()), Err(Error::Integrity(_))));
    }
}
