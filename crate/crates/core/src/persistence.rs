//! Single-file checkpoint container.
//!
//! ```text
//! offset 0   b"CGRSCKPT"                      magic, 8 bytes
//!        8   u32 LE                           format version (1)
//!       12   u64 LE                           header length H
//!       20   H bytes                          JSON header (UTF-8)
//!   20 + H   payload                          f32 LE tensors, back to back
//!      end   32 bytes                         SHA-256 of every preceding byte
//! ```
//!
//! The header holds the config snapshot, step, RNG state, frozen groups,
//! optimizer step counts and an index of `{name, shape, offset, len}` entries
//! (offset and length in bytes, relative to the payload start). Tensor names:
//! `param/<name>` for parameters and batch-norm statistics,
//! `adam/<opt>/{m,v}/<name>` for optimizer moments.
//!
//! Values are stored as `f32` whatever the compute precision; `f64` runs
//! round-trip through that quantization.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::networks::params::{Group, GroupSet};
use crate::training::config::ExperimentConfig;
use crate::training::optim::{Adam, Moments};
use crate::training::TrainState;

pub const MAGIC: &[u8; 8] = b"CGRSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex of the 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Decimal; exceeds 64 bits in principle.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Integrity("checkpoint RNG state is malformed".into());
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad())?
            .try_into()
            .map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ExperimentConfig,
    pub step: u64,
    pub rng: RngState,
    /// Group prefixes excluded from updates.
    pub frozen: Vec<String>,
    /// Update counts of the `vae`, `disc` and `gen` optimizers.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

/// A checkpoint read from disk, digest verified.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub header: CheckpointHeader,
    pub digest: String,
    payload: Vec<u8>,
}

impl Checkpoint {
    /// Values of one tensor as `f32`.
    pub fn tensor_values(&self, entry: &TensorEntry) -> Result<Vec<f32>> {
        let start = usize::try_from(entry.offset).map_err(|_| corrupt("offset"))?;
        let len = usize::try_from(entry.len).map_err(|_| corrupt("length"))?;
        let count: usize = entry.shape.iter().product();
        let bytes = self
            .payload
            .get(start..start.checked_add(len).ok_or_else(|| corrupt("length"))?)
            .ok_or_else(|| corrupt(&entry.name))?;
        if len != count * 4 {
            return Err(corrupt(&entry.name));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn tensor(&self, entry: &TensorEntry, dtype: DType) -> Result<Tensor> {
        let v = self.tensor_values(entry)?;
        Ok(Tensor::from_vec(v, entry.shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn find(&self, name: &str) -> Option<&TensorEntry> {
        self.header.tensors.iter().find(|e| e.name == name)
    }
}

fn corrupt(what: &str) -> Error {
    Error::Integrity(format!("checkpoint index entry {what} points outside the payload"))
}

const OPTIMIZERS: [&str; 3] = ["vae", "disc", "gen"];

fn optimizers(state: &TrainState) -> [(&'static str, &Adam); 3] {
    [
        (OPTIMIZERS[0], &state.opt_vae),
        (OPTIMIZERS[1], &state.opt_disc),
        (OPTIMIZERS[2], &state.opt_gen),
    ]
}

fn push_tensor(payload: &mut Vec<u8>, entries: &mut Vec<TensorEntry>, name: String, t: &Tensor) -> Result<()> {
    let values = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let offset = payload.len() as u64;
    for v in &values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    entries.push(TensorEntry {
        name,
        shape: t.dims().to_vec(),
        offset,
        len: (values.len() * 4) as u64,
    });
    Ok(())
}

/// Serializes `state` to bytes; the digest is the trailing 32 bytes.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in state.model.store.iter() {
        push_tensor(&mut payload, &mut tensors, format!("param/{name}"), p.var.as_tensor())?;
    }
    let mut optimizer_steps = BTreeMap::new();
    for (opt, adam) in optimizers(state) {
        optimizer_steps.insert(opt.to_string(), adam.t);
        for (name, m) in adam.moments() {
            push_tensor(&mut payload, &mut tensors, format!("adam/{opt}/m/{name}"), &m.m)?;
            push_tensor(&mut payload, &mut tensors, format!("adam/{opt}/v/{name}"), &m.v)?;
        }
    }
    let header = CheckpointHeader {
        config: state.config.clone(),
        step: state.step,
        rng: RngState::capture(&state.rng),
        frozen: state.frozen.iter().map(|g| g.prefix().to_string()).collect(),
        optimizer_steps,
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes `state` atomically (temporary file, then rename) and returns the
/// hex SHA-256 digest stored in the file.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<String> {
    let bytes = encode_checkpoint(state)?;
    let digest = hex::encode(&bytes[bytes.len() - DIGEST_LEN..]);
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(digest)
}

/// Parses and verifies checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic or truncated)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version > FORMAT_VERSION || version == 0 {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint".into(),
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(Error::Integrity("checkpoint digest does not match its contents".into()));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| PREAMBLE.checked_add(h))
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("checkpoint header length exceeds the file".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&body[PREAMBLE..header_end])
        .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
    Ok(Checkpoint {
        version,
        header,
        digest: hex::encode(stored),
        payload: body[header_end..].to_vec(),
    })
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Integrity(m) => Error::Integrity(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Rebuilds the training state stored in `ckpt`.
pub fn restore_state(ckpt: &Checkpoint, expected: Option<&ExperimentConfig>) -> Result<TrainState> {
    let h = &ckpt.header;
    if let Some(exp) = expected {
        let errs = h.config.compatibility_errors(exp);
        if !errs.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint is incompatible with the expected config: {}",
                errs.join("; ")
            )));
        }
    }
    let mut state = TrainState::new(h.config.clone())?;
    let dtype = state.model.dtype();
    let mut moments: BTreeMap<&str, BTreeMap<String, Moments>> = BTreeMap::new();
    let mut pending_m: BTreeMap<(String, String), Tensor> = BTreeMap::new();
    let mut seen = 0usize;
    for entry in &h.tensors {
        let t = ckpt.tensor(entry, dtype)?;
        if let Some(name) = entry.name.strip_prefix("param/") {
            state.model.store.assign(name, &t)?;
            seen += 1;
        } else if let Some(rest) = entry.name.strip_prefix("adam/") {
            let mut parts = rest.splitn(3, '/');
            let (opt, kind, name) = match (parts.next(), parts.next(), parts.next()) {
                (Some(o), Some(k), Some(n)) => (o, k, n),
                _ => return Err(Error::Integrity(format!("bad tensor name {}", entry.name))),
            };
            let opt = OPTIMIZERS
                .into_iter()
                .find(|o| *o == opt)
                .ok_or_else(|| Error::Integrity(format!("unknown optimizer in {}", entry.name)))?;
            match kind {
                "m" => {
                    pending_m.insert((opt.to_string(), name.to_string()), t);
                }
                "v" => {
                    let m = pending_m
                        .remove(&(opt.to_string(), name.to_string()))
                        .ok_or_else(|| Error::Integrity(format!("second moment without first: {}", entry.name)))?;
                    moments.entry(opt).or_default().insert(name.to_string(), Moments { m, v: t });
                }
                _ => return Err(Error::Integrity(format!("bad tensor name {}", entry.name))),
            }
        } else {
            return Err(Error::Integrity(format!("unknown tensor {}", entry.name)));
        }
    }
    if seen != state.model.store.len() {
        let stored: std::collections::HashSet<&str> =
            h.tensors.iter().filter_map(|e| e.name.strip_prefix("param/")).collect();
        let missing: Vec<&String> = state
            .model
            .store
            .iter()
            .map(|(n, _)| n)
            .filter(|n| !stored.contains(n.as_str()))
            .collect();
        return Err(Error::Config(format!("checkpoint lacks parameters {missing:?}")));
    }
    if let Some(((opt, name), _)) = pending_m.into_iter().next() {
        return Err(Error::Integrity(format!("first moment without second: adam/{opt}/m/{name}")));
    }
    let step_of = |o: &str| h.optimizer_steps.get(o).copied().unwrap_or(0);
    let mut take = |o: &str| moments.remove(o).unwrap_or_default();
    let (mv, md, mg) = (take("vae"), take("disc"), take("gen"));
    state.opt_vae.restore(step_of("vae"), mv);
    state.opt_disc.restore(step_of("disc"), md);
    state.opt_gen.restore(step_of("gen"), mg);
    state.step = h.step;
    state.rng = h.rng.restore()?;
    let frozen = h
        .frozen
        .iter()
        .map(|p| {
            Group::ALL
                .into_iter()
                .find(|g| g.prefix() == p)
                .ok_or_else(|| Error::Integrity(format!("unknown frozen group {p}")))
        })
        .collect::<Result<Vec<_>>>()?;
    state.frozen = GroupSet::of(&frozen);
    Ok(state)
}

/// Loads a checkpoint; with `expected`, rejects architecture, split or
/// scenario mismatches.
pub fn load_checkpoint(path: &Path, expected: Option<&ExperimentConfig>) -> Result<TrainState> {
    restore_state(&read_checkpoint(path)?, expected)
}

/// Human-readable index: version, digest and header as pretty JSON.
pub fn inspect(path: &Path) -> Result<String> {
    let ckpt = read_checkpoint(path)?;
    let v = serde_json::json!({
        "format_version": ckpt.version,
        "digest": ckpt.digest,
        "payload_bytes": ckpt.payload.len(),
        "header": ckpt.header,
    });
    Ok(serde_json::to_string_pretty(&v).expect("json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ArchConfig;
    use crate::training::config::Precision;

    fn state() -> TrainState {
        let cfg = ExperimentConfig {
            arch: ArchConfig::tiny(),
            precision: Precision::F32,
            seed: 4,
            ..ExperimentConfig::default()
        };
        let mut st = TrainState::new(cfg).unwrap();
        st.step = 17;
        st.frozen = GroupSet::DECODERS;
        st
    }

    fn param_bytes(st: &TrainState) -> Vec<(String, Vec<u32>)> {
        st.model
            .store
            .iter()
            .map(|(n, p)| {
                let v = p.var.flatten_all().unwrap().to_vec1::<f32>().unwrap();
                (n.clone(), v.iter().map(|x| x.to_bits()).collect())
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let st = state();
        save_checkpoint(&st, &p).unwrap();
        let back = load_checkpoint(&p, Some(&st.config)).unwrap();
        assert_eq!(param_bytes(&back), param_bytes(&st));
        assert_eq!(back.step, 17);
        assert_eq!(back.frozen, GroupSet::DECODERS);
        assert_eq!(RngState::capture(&back.rng), RngState::capture(&st.rng));
    }

    #[test]
    fn identical_states_identical_digests() {
        let dir = tempfile::tempdir().unwrap();
        let a = save_checkpoint(&state(), &dir.path().join("a")).unwrap();
        let b = save_checkpoint(&state(), &dir.path().join("b")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tampering_and_versions_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Integrity(_))));

        let mut future = std::fs::read(&p).unwrap();
        future[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&future),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
        assert!(matches!(decode_checkpoint(b"garbage"), Err(Error::Integrity(_))));
    }

    #[test]
    fn mismatched_split_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        let st = state();
        save_checkpoint(&st, &p).unwrap();
        let other = ExperimentConfig {
            split: "H5L1".parse().unwrap(),
            ..st.config.clone()
        };
        match load_checkpoint(&p, Some(&other)) {
            Err(Error::Config(m)) => assert!(m.contains("n_high") && m.contains("n_low"), "{m}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn failed_write_leaves_no_file() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("sub");
        std::fs::write(&target, b"a file where a directory is expected").unwrap();
        assert!(save_checkpoint(&state(), &target.join("x.ckpt")).is_err());
        assert!(!target.join("x.ckpt").exists());
    }

    #[test]
    fn inspect_prints_the_index() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ckpt");
        save_checkpoint(&state(), &p).unwrap();
        let text = inspect(&p).unwrap();
        assert!(text.contains("\"format_version\": 1"));
        assert!(text.contains("param/dec_s.deconv0.weight"));
    }
}
