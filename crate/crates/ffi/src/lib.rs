//! C ABI over the `cgrs` crate.
//!
//! Every function returns a [`CgrsStatus`]; on failure the message is
//! available from [`cgrs_last_error`] on the same thread. Models are opaque
//! handles created by `cgrs_model_*` constructors and released with
//! [`cgrs_model_free`]. Strings handed out by the library are released with
//! [`cgrs_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use cgrs::datasets::{LabeledImageSet, Split};
use cgrs::evaluation::{self, EvalChannel};
use cgrs::training::{self, TrainData, TrainState};
use cgrs::{persistence, Error, ExperimentConfig, IMAGE_SIZE};

/// Result codes. Values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgrsStatus {
    Ok = 0,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Integrity = 6,
    UnsupportedVersion = 7,
    NullPointer = 8,
    Panic = 9,
}

/// Which prediction to return from [`cgrs_model_classify`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgrsChannel {
    St = 0,
    Ts = 1,
    Combined = 2,
}

impl From<CgrsChannel> for EvalChannel {
    fn from(c: CgrsChannel) -> Self {
        match c {
            CgrsChannel::St => EvalChannel::St,
            CgrsChannel::Ts => EvalChannel::Ts,
            CgrsChannel::Combined => EvalChannel::Combined,
        }
    }
}

/// A trained or training model together with its configuration.
pub struct CgrsModel {
    state: TrainState,
    data: Option<TrainData>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> CgrsStatus {
    match e {
        Error::Config(_) | Error::Contract(_) => CgrsStatus::Config,
        Error::UnsupportedVersion { .. } => CgrsStatus::UnsupportedVersion,
        Error::Integrity(_) => CgrsStatus::Integrity,
        Error::Data(_) | Error::Ingest { .. } => CgrsStatus::Data,
        Error::Numeric { .. } | Error::Backend(_) => CgrsStatus::Numeric,
        Error::Io { .. } => CgrsStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CgrsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CgrsStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            CgrsStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CgrsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Lib(Error::Config(format!("{what} is not valid UTF-8"))))
}

unsafe fn model_mut<'a>(m: *mut CgrsModel) -> Result<&'a mut CgrsModel, Fail> {
    m.as_mut().ok_or(Fail::Null("model"))
}

fn hand_out(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).unwrap_or_default().into_raw()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cgrs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success).
/// Valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn cgrs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_load(path: *const c_char, out: *mut *mut CgrsModel) -> CgrsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let state = persistence::load_checkpoint(&PathBuf::from(path), None)?;
        *out = Box::into_raw(Box::new(CgrsModel { state, data: None }));
        Ok(())
    })
}

/// Creates an untrained model from a TOML configuration (empty string for defaults).
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_new(config_toml: *const c_char, out: *mut *mut CgrsModel) -> CgrsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        *out = ptr::null_mut();
        let cfg = ExperimentConfig::from_toml_str(str_arg(config_toml, "config_toml")?)?;
        let state = TrainState::new(cfg)?;
        *out = Box::into_raw(Box::new(CgrsModel { state, data: None }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from a `cgrs_model_*` constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_free(model: *mut CgrsModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Completed training rounds.
///
/// # Safety
/// `model` must be a live handle; `out_step` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_step_count(model: *const CgrsModel, out_step: *mut u64) -> CgrsStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let out = out_step.as_mut().ok_or(Fail::Null("out_step"))?;
        *out = m.state.step;
        Ok(())
    })
}

/// Runs `rounds` training rounds on the datasets named by the model's
/// configuration (loaded on first use). Writes the last objective value.
///
/// # Safety
/// `model` must be a live handle; `out_objective` may be null.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_step(model: *mut CgrsModel, rounds: u64, out_objective: *mut f64) -> CgrsStatus {
    guard(|| {
        let m = model_mut(model)?;
        if m.data.is_none() {
            m.data = Some(TrainData::load(&m.state.config)?);
        }
        let data = m.data.as_ref().expect("loaded above");
        let mut objective = f64::NAN;
        for _ in 0..rounds {
            objective = m.state.round(data)?.objective();
        }
        if let Some(o) = out_objective.as_mut() {
            *o = objective;
        }
        Ok(())
    })
}

/// Classifies `count` images of `channels` (1 or 3) channels, row-major
/// (count, 28, 28, channels) with values in [0, 1]. Writes `count` labels.
///
/// # Safety
/// `pixels` must hold `count * 784 * channels` floats; `out_labels` must hold `count` bytes.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_classify(
    model: *const CgrsModel,
    pixels: *const f32,
    count: usize,
    channels: usize,
    channel: CgrsChannel,
    out_labels: *mut u8,
) -> CgrsStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if count == 0 {
            return Ok(());
        }
        if pixels.is_null() {
            return Err(Fail::Null("pixels"));
        }
        if out_labels.is_null() {
            return Err(Fail::Null("out_labels"));
        }
        let n = count * IMAGE_SIZE * IMAGE_SIZE * channels;
        let px = std::slice::from_raw_parts(pixels, n).to_vec();
        let set = LabeledImageSet::new("ffi", Split::Test, channels, px, vec![0; count])?;
        let cfg = &m.state.config;
        let labels = evaluation::predict(&m.state.model, &set, channel.into(), cfg.split, cfg.eval_batch_size)?;
        std::slice::from_raw_parts_mut(out_labels, count).copy_from_slice(&labels);
        Ok(())
    })
}

/// Saves the model as a checkpoint. `out_digest` (may be null) receives the
/// hex SHA-256 of the file, to be released with [`cgrs_string_free`].
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cgrs_model_save(
    model: *const CgrsModel,
    path: *const c_char,
    out_digest: *mut *mut c_char,
) -> CgrsStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let path = str_arg(path, "path")?;
        let digest = persistence::save_checkpoint(&m.state, &PathBuf::from(path))?;
        if let Some(o) = out_digest.as_mut() {
            *o = hand_out(digest);
        }
        Ok(())
    })
}

/// Learning rate after `step` rounds: `lr0 * decay^floor(step / decay_every)`.
#[no_mangle]
pub extern "C" fn cgrs_lr_schedule(step: u64, lr0: f64, decay: f64, decay_every: u64) -> f64 {
    let cfg = ExperimentConfig {
        lr0,
        decay,
        decay_every: decay_every.max(1),
        ..ExperimentConfig::default()
    };
    training::lr_schedule(step, &cfg)
}

/// Writes the JSON header of a checkpoint to `out_json`, to be released with
/// [`cgrs_string_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgrs_checkpoint_inspect(path: *const c_char, out_json: *mut *mut c_char) -> CgrsStatus {
    guard(|| {
        let out = out_json.as_mut().ok_or(Fail::Null("out_json"))?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        *out = hand_out(persistence::inspect(&PathBuf::from(path))?);
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgrs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
