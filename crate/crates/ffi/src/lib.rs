//! C interface to the speech recognizer.
//!
//! Objects are opaque handles created by `s2s_*_new`/`s2s_*_load`/`s2s_*_bundled`
//! and released with the matching `s2s_*_free`. Every fallible function
//! returns an [`S2sStatus`]; on failure, `s2s_last_error` describes the most
//! recent error of the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use seq2seq_asr::autodiff::Tensor;
use seq2seq_asr::eval::{edit_distance, normalize_words};
use seq2seq_asr::model::Model;
use seq2seq_asr::pipeline::{PipelineError, RunConfig};
use seq2seq_asr::search::greedy_decode;
use seq2seq_asr::text::BpeModel;

/// Result of every fallible call. Values 2 to 4 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum S2sStatus {
    Ok = 0,
    Other = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    NullPointer = 5,
    InvalidUtf8 = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A resolved run configuration.
pub struct S2sConfig(RunConfig);

/// A trained acoustic model.
pub struct S2sModel(Model);

/// A trained subword model.
pub struct S2sBpe(BpeModel);

/// Parameter counts of a configuration.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct S2sParamCounts {
    pub encoder: u64,
    pub decoder: u64,
    pub total: u64,
    pub lm: u64,
}

/// Word-level alignment counts.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct S2sEditCounts {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub reference_words: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(S2sStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e.exit_code() {
            2 => S2sStatus::Config,
            3 => S2sStatus::Data,
            4 => S2sStatus::Numeric,
            _ => S2sStatus::Other,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error or panic for `s2s_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> S2sStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => S2sStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            S2sStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(S2sStatus::NullPointer, format!("{} is null", what)));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(S2sStatus::InvalidUtf8, format!("{} is not valid UTF-8", what)))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(S2sStatus::NullPointer, format!("{} is null", what)))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(S2sStatus::NullPointer, format!("{} is null", what)))
    } else {
        Ok(())
    }
}

/// Message of the calling thread's most recent error, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn s2s_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn s2s_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Loads a bundled configuration (`full`, `small`, `lm-large`, `toy`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_bundled(name: *const c_char, out: *mut *mut S2sConfig) -> S2sStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = RunConfig::bundled(text(name, "name")?).map_err(PipelineError::from)?;
        *out = Box::into_raw(Box::new(S2sConfig(cfg)));
        Ok(())
    })
}

/// Reads a flat `key = value` configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_load(path: *const c_char, out: *mut *mut S2sConfig) -> S2sStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = text(path, "path")?;
        if !Path::new(p).exists() {
            return Err(Failure(S2sStatus::Data, format!("config file not found: {}", p)));
        }
        let cfg = RunConfig::from_file(Path::new(p)).map_err(PipelineError::from)?;
        *out = Box::into_raw(Box::new(S2sConfig(cfg)));
        Ok(())
    })
}

/// Sets one key; unknown keys and invalid values are rejected.
///
/// # Safety
/// `cfg` must come from this library; `key` and `value` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_set(cfg: *mut S2sConfig, key: *const c_char, value: *const c_char) -> S2sStatus {
    guard(|| {
        let c = cfg.as_mut().ok_or_else(|| Failure(S2sStatus::NullPointer, "config is null".into()))?;
        c.0.set(text(key, "key")?, text(value, "value")?).map_err(PipelineError::from)?;
        Ok(())
    })
}

/// Parameter counts of the configured model and language model.
///
/// # Safety
/// `cfg` must come from this library and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_param_counts(cfg: *const S2sConfig, out: *mut S2sParamCounts) -> S2sStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let c = &handle(cfg, "config")?.0;
        let m = c.model.param_counts();
        *out = S2sParamCounts { encoder: m.encoder as u64, decoder: m.decoder as u64, total: m.total as u64, lm: c.lm.num_params() as u64 };
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2s_config_free(cfg: *mut S2sConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_load(path: *const c_char, out: *mut *mut S2sModel) -> S2sStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = text(path, "path")?;
        let m = Model::load(Path::new(p)).map_err(|e| Failure(S2sStatus::Data, format!("{}: {}", p, e)))?;
        *out = Box::into_raw(Box::new(S2sModel(m)));
        Ok(())
    })
}

/// Input feature dimension the model expects.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_feature_dim(model: *const S2sModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.feature_dim)
}

/// Output vocabulary size including the special tokens.
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_vocab_size(model: *const S2sModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.config.vocab_size)
}

/// Greedy decoding of one utterance of already normalized features
/// (`frames` × `dim`, row-major). Writes at most `capacity` token ids and
/// the full hypothesis length to `out_len`; returns `BufferTooSmall` when
/// the hypothesis does not fit.
///
/// # Safety
/// `features` must hold `frames * dim` values, `tokens` `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_greedy_decode(
    model: *const S2sModel,
    features: *const f64,
    frames: usize,
    dim: usize,
    max_output_factor: f64,
    tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> S2sStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        out_ptr(out_len, "out_len")?;
        if features.is_null() {
            return Err(Failure(S2sStatus::NullPointer, "features is null".into()));
        }
        if dim != m.config.feature_dim {
            return Err(Failure(S2sStatus::Data, format!("feature dim {} but the model expects {}", dim, m.config.feature_dim)));
        }
        let data = std::slice::from_raw_parts(features, frames * dim).to_vec();
        let hyp = greedy_decode(m, &Tensor::matrix(frames, dim, data), max_output_factor).map_err(|e| Failure(S2sStatus::Data, e.to_string()))?;
        *out_len = hyp.len();
        if hyp.len() > capacity {
            return Err(Failure(S2sStatus::BufferTooSmall, format!("hypothesis has {} tokens, buffer holds {}", hyp.len(), capacity)));
        }
        if !hyp.is_empty() {
            out_ptr(tokens, "tokens")?;
            for (i, &t) in hyp.iter().enumerate() {
                *tokens.add(i) = t as u32;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2s_model_free(model: *mut S2sModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a subword model.
///
/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_bpe_load(path: *const c_char, out: *mut *mut S2sBpe) -> S2sStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let p = text(path, "path")?;
        let b = BpeModel::load(Path::new(p)).map_err(|e| Failure(S2sStatus::Data, format!("{}: {}", p, e)))?;
        *out = Box::into_raw(Box::new(S2sBpe(b)));
        Ok(())
    })
}

/// Turns token ids into text. Writes a NUL-terminated string into `buf` when
/// it fits and always reports the required size (including the NUL) in
/// `needed`.
///
/// # Safety
/// `tokens` must hold `n` ids and `buf` `capacity` bytes.
#[no_mangle]
pub unsafe extern "C" fn s2s_bpe_decode(bpe: *const S2sBpe, tokens: *const u32, n: usize, buf: *mut c_char, capacity: usize, needed: *mut usize) -> S2sStatus {
    guard(|| {
        let b = &handle(bpe, "bpe")?.0;
        out_ptr(needed, "needed")?;
        if n > 0 && tokens.is_null() {
            return Err(Failure(S2sStatus::NullPointer, "tokens is null".into()));
        }
        let ids: Vec<usize> = if n == 0 { Vec::new() } else { std::slice::from_raw_parts(tokens, n).iter().map(|&t| t as usize).collect() };
        if let Some(bad) = ids.iter().find(|&&t| t >= b.vocab.len()) {
            return Err(Failure(S2sStatus::Data, format!("token {} outside vocabulary of {}", bad, b.vocab.len())));
        }
        let s = b.decode(&ids);
        *needed = s.len() + 1;
        if s.len() + 1 > capacity {
            return Err(Failure(S2sStatus::BufferTooSmall, format!("text needs {} bytes, buffer holds {}", s.len() + 1, capacity)));
        }
        out_ptr(buf, "buf")?;
        ptr::copy_nonoverlapping(s.as_ptr() as *const c_char, buf, s.len());
        *buf.add(s.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `bpe` must come from this library or be null; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn s2s_bpe_free(bpe: *mut S2sBpe) {
    if !bpe.is_null() {
        drop(Box::from_raw(bpe));
    }
}

/// Word alignment counts between a reference and a hypothesis, after the
/// same normalization the scorer applies.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn s2s_word_errors(reference: *const c_char, hypothesis: *const c_char, out: *mut S2sEditCounts) -> S2sStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let r = normalize_words(text(reference, "reference")?);
        let h = normalize_words(text(hypothesis, "hypothesis")?);
        let c = edit_distance(&r, &h);
        *out = S2sEditCounts { substitutions: c.sub as u64, deletions: c.del as u64, insertions: c.ins as u64, reference_words: r.len() as u64 };
        Ok(())
    })
}
