//! Downloading the raw archives. This is the only networked code path.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use md5::Md5;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Error, Result};

const MNIST_BASE: &str = "https://ossci-datasets.s3.amazonaws.com/mnist/";
const FASHION_BASE: &str =
    "https://raw.githubusercontent.com/zalandoresearch/fashion-mnist/master/data/fashion/";
const USPS_BASE: &str = "https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/multiclass/";
const BSDS_BASE: &str =
    "https://www2.eecs.berkeley.edu/Research/Projects/CS/vision/grouping/BSR/";
const BSDS_ARCHIVE: &str = "BSR_bsds500.tgz";
const BSDS_TRAIN_PREFIX: &str = "BSR/BSDS500/data/images/train/";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FetchTarget {
    Mnist,
    Fashion,
    Usps,
    /// Berkeley segmentation images, used as MNIST-M / Fashion-M backgrounds.
    Bsds,
}

impl FetchTarget {
    pub const ALL: [FetchTarget; 4] = [
        FetchTarget::Mnist,
        FetchTarget::Fashion,
        FetchTarget::Usps,
        FetchTarget::Bsds,
    ];

    pub fn dir_name(self) -> &'static str {
        match self {
            FetchTarget::Mnist => "mnist",
            FetchTarget::Fashion => "fashion",
            FetchTarget::Usps => "usps",
            FetchTarget::Bsds => "bsds",
        }
    }
}

impl fmt::Display for FetchTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for FetchTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mnist" => Ok(FetchTarget::Mnist),
            "fashion" => Ok(FetchTarget::Fashion),
            "usps" => Ok(FetchTarget::Usps),
            "bsds" | "bsds500" => Ok(FetchTarget::Bsds),
            other => config_err(format!(
                "cannot fetch '{other}' (expected mnist, fashion, usps or bsds; derived sets come from `cgrs synth`)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resource {
    pub url: String,
    pub file: &'static str,
    /// Expected MD5 of the downloaded bytes, when a published value exists.
    pub md5: Option<&'static str>,
}

const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte.gz", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte.gz", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte.gz", "ec29112dd5afa0611ce80d1b7f02629c"),
];

const FASHION_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte.gz", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
    ("train-labels-idx1-ubyte.gz", "25c81989df183df01b3e8a0aad5dffbe"),
    ("t10k-images-idx3-ubyte.gz", "bef4ecab320f06d8554ea6380940ec79"),
    ("t10k-labels-idx1-ubyte.gz", "bb300cfdad3c16e7a12a480ee83cd310"),
];

const USPS_FILES: [(&str, &str); 2] = [
    ("usps.bz2", "ec16c51db3855ca6c91edd34d0e9b197"),
    ("usps.t.bz2", "8ea070ee2aca1ac39742fdd1ef5ed118"),
];

/// Files to download for `target`. `mirror` replaces the default base URL.
pub fn resources(target: FetchTarget, mirror: Option<&str>) -> Vec<Resource> {
    let join = |default: &str, file: &str| {
        let base = mirror.unwrap_or(default);
        if base.ends_with('/') {
            format!("{base}{file}")
        } else {
            format!("{base}/{file}")
        }
    };
    let pinned = |default: &'static str, files: &[(&'static str, &'static str)]| {
        files
            .iter()
            .map(|&(file, md5)| Resource {
                url: join(default, file),
                file,
                md5: Some(md5),
            })
            .collect::<Vec<_>>()
    };
    match target {
        FetchTarget::Mnist => pinned(MNIST_BASE, &MNIST_FILES),
        FetchTarget::Fashion => pinned(FASHION_BASE, &FASHION_FILES),
        FetchTarget::Usps => pinned(USPS_BASE, &USPS_FILES),
        FetchTarget::Bsds => vec![Resource {
            url: join(BSDS_BASE, BSDS_ARCHIVE),
            file: BSDS_ARCHIVE,
            md5: None,
        }],
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FetchedFile {
    pub path: PathBuf,
    pub sha256: String,
    pub verified: bool,
}

/// Downloads `url` to `dest` (via a temporary file in the same directory),
/// checking `md5` when given. Nothing is left at `dest` on failure.
pub fn download(url: &str, dest: &Path, md5: Option<&str>) -> Result<FetchedFile> {
    let dir = dest.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let response = ureq::get(url)
        .call()
        .map_err(|e| Error::io(dest, std::io::Error::other(format!("GET {url}: {e}"))))?;
    let mut reader = response.into_reader();
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    let mut md5_hasher = Md5::new();
    let mut sha = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf).map_err(|e| Error::io(dest, e))?;
        if n == 0 {
            break;
        }
        md5_hasher.update(&buf[..n]);
        sha.update(&buf[..n]);
        tmp.write_all(&buf[..n]).map_err(|e| Error::io(dest, e))?;
    }
    let got_md5 = hex::encode(md5_hasher.finalize());
    if let Some(expected) = md5 {
        if !got_md5.eq_ignore_ascii_case(expected) {
            return Err(Error::Integrity(format!(
                "{url}: md5 {got_md5} does not match expected {expected}"
            )));
        }
    }
    tmp.persist(dest).map_err(|e| Error::io(dest, e.error))?;
    Ok(FetchedFile {
        path: dest.to_path_buf(),
        sha256: hex::encode(sha.finalize()),
        verified: md5.is_some(),
    })
}

/// Fetches every archive of `target` into `<root>/<target>/`. With `dry_run`
/// only the plan is returned.
pub fn fetch(
    target: FetchTarget,
    root: &Path,
    mirror: Option<&str>,
    dry_run: bool,
) -> Result<Vec<FetchedFile>> {
    let dir = root.join(target.dir_name());
    let mut out = Vec::new();
    for res in resources(target, mirror) {
        let dest = dir.join(res.file);
        if dry_run {
            log::info!("would fetch {} -> {}", res.url, dest.display());
            continue;
        }
        log::info!("fetching {} -> {}", res.url, dest.display());
        let fetched = download(&res.url, &dest, res.md5)?;
        if !fetched.verified {
            log::warn!(
                "{} has no published digest; sha256 = {}",
                dest.display(),
                fetched.sha256
            );
        }
        if target == FetchTarget::Bsds {
            let n = extract_bsds_train(&dest, &dir.join("images"))?;
            log::info!("extracted {n} background images");
        }
        out.push(fetched);
    }
    Ok(out)
}

/// Unpacks the BSDS500 training images from the tarball into `out_dir`.
pub fn extract_bsds_train(archive: &Path, out_dir: &Path) -> Result<usize> {
    let file = File::open(archive).map_err(|e| Error::io(archive, e))?;
    let mut tar = tar::Archive::new(flate2::read::GzDecoder::new(BufReader::new(file)));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut count = 0;
    let entries = tar
        .entries()
        .map_err(|e| Error::ingest(archive, format!("bad tar archive: {e}")))?;
    for entry in entries {
        let mut entry = entry.map_err(|e| Error::ingest(archive, format!("bad tar entry: {e}")))?;
        let path = entry
            .path()
            .map_err(|e| Error::ingest(archive, format!("bad tar path: {e}")))?
            .into_owned();
        let Some(name) = path.to_str() else { continue };
        if !(name.starts_with(BSDS_TRAIN_PREFIX) && name.ends_with(".jpg")) {
            continue;
        }
        let file_name = path.file_name().expect("jpg entries have a file name");
        let dest = out_dir.join(file_name);
        entry
            .unpack(&dest)
            .map_err(|e| Error::io(&dest, e))?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::ingest(archive, "no training images inside the archive"));
    }
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader};
    use std::net::TcpListener;

    /// Serves `body` once over plain HTTP and returns the URL.
    fn serve_once(body: &'static [u8]) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            while reader.read_line(&mut line).unwrap() > 0 {
                if line == "\r\n" {
                    break;
                }
                line.clear();
            }
            let head = format!(
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(body).unwrap();
        });
        format!("http://{addr}/file.bin")
    }

    #[test]
    fn download_verifies_md5() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("file.bin");
        // md5("hello world")
        let url = serve_once(b"hello world");
        let got = download(&url, &dest, Some("5eb63bbbe01eeed093cb22bb8f5acdc3")).unwrap();
        assert!(got.verified);
        assert_eq!(std::fs::read(&dest).unwrap(), b"hello world");
    }

    #[test]
    fn digest_mismatch_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        let dest = dir.path().join("file.bin");
        let url = serve_once(b"tampered");
        let err = download(&url, &dest, Some("5eb63bbbe01eeed093cb22bb8f5acdc3")).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
        assert!(!dest.exists());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn resources_honor_mirror() {
        let r = resources(FetchTarget::Mnist, Some("http://mirror.local/mnist"));
        assert_eq!(r.len(), 4);
        assert_eq!(r[0].url, "http://mirror.local/mnist/train-images-idx3-ubyte.gz");
        assert!(r.iter().all(|x| x.md5.is_some()));
        assert!(resources(FetchTarget::Bsds, None)[0].md5.is_none());
    }

    #[test]
    fn derived_sets_are_not_fetchable() {
        assert!(matches!("mnist-m".parse::<FetchTarget>(), Err(Error::Config(_))));
    }

    #[test]
    fn dry_run_touches_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = fetch(FetchTarget::Usps, dir.path(), Some("http://127.0.0.1:9"), true).unwrap();
        assert!(out.is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
