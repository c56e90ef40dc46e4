//! C ABI over the mmevent pipelines.
//!
//! Every function returns an [`MmeStatus`]. On failure the message is kept
//! per thread and can be read with [`mme_last_error`]. Handles are opaque and
//! must be released with their `_free` function; strings returned through
//! `out` parameters are released with [`mme_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mmevent::config::LoadedConfig;
use mmevent::model::ModelBundle;
use mmevent::trainer::Ablation;
use mmevent::{pipeline, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MmeStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Bad configuration or input data.
    Config = 3,
    Io = 4,
    /// Augmentation cache entries are missing; run augmentation first.
    MissingCache = 5,
    /// Gold and predictions are inconsistent.
    Evaluation = 6,
    Runtime = 7,
    Panic = 8,
}

/// A validated run configuration.
pub struct MmeConfig {
    inner: LoadedConfig,
}

/// Trained mention and argument models.
pub struct MmeBundle {
    inner: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MmeStatus {
    match e {
        Error::Io { .. } => MmeStatus::Io,
        Error::MissingCache { .. } => MmeStatus::MissingCache,
        Error::Evaluation(_) => MmeStatus::Evaluation,
        e if e.is_usage() => MmeStatus::Config,
        _ => MmeStatus::Runtime,
    }
}

struct Fail(MmeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MmeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmeStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmeStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(MmeStatus::NullArgument, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MmeStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(MmeStatus::NullArgument, format!("`{name}` is null")))
}

fn out_string(out: *mut *mut c_char, s: String) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail(MmeStatus::NullArgument, "`out` is null".into()));
    }
    let c = CString::new(s).map_err(|e| Fail(MmeStatus::Runtime, e.to_string()))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, Fail> {
    serde_json::to_string(v).map_err(|e| Fail(MmeStatus::Runtime, e.to_string()))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mme_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mme_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads and validates a TOML run configuration. `overrides` holds
/// `n_overrides` strings of the form `key.path=value`; it may be null when
/// `n_overrides` is 0.
///
/// # Safety
/// `path` and every override must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mme_config_load(
    path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    out: *mut *mut MmeConfig,
) -> MmeStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(Fail(MmeStatus::NullArgument, "`out` is null".into()));
        }
        let mut ov = Vec::with_capacity(n_overrides);
        if n_overrides > 0 {
            if overrides.is_null() {
                return Err(Fail(MmeStatus::NullArgument, "`overrides` is null".into()));
            }
            for i in 0..n_overrides {
                ov.push(text(*overrides.add(i), "override")?.to_string());
            }
        }
        let inner = LoadedConfig::from_file(&PathBuf::from(path), &ov)?;
        *out = Box::into_raw(Box::new(MmeConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from [`mme_config_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mme_config_free(cfg: *mut MmeConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Loads a `bundle.json` written by training, or a single checkpoint used
/// for every task.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mme_bundle_load(path: *const c_char, out: *mut *mut MmeBundle) -> MmeStatus {
    guard(|| {
        let path = text(path, "path")?;
        if out.is_null() {
            return Err(Fail(MmeStatus::NullArgument, "`out` is null".into()));
        }
        let inner = pipeline::load_bundle(&PathBuf::from(path))?;
        *out = Box::into_raw(Box::new(MmeBundle { inner }));
        Ok(())
    })
}

/// # Safety
/// `bundle` must come from [`mme_bundle_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mme_bundle_free(bundle: *mut MmeBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// Fills the augmentation cache (both directions). The JSON manifest is
/// returned through `out_json`.
///
/// # Safety
/// `cfg` must be a live handle; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mme_augment(cfg: *const MmeConfig, out_json: *mut *mut c_char) -> MmeStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let m = pipeline::augment(
            &cfg.inner,
            &[pipeline::Direction::Text2Img, pipeline::Direction::Img2Txt],
            None,
        )?;
        out_string(out_json, json(&m)?)
    })
}

/// Trains under the configured schedule. `ablation` is null for the full
/// run, otherwise one of `combined`, `one-round`, `no-augmentation`,
/// `no-adapter`. The training manifest is returned as JSON.
///
/// # Safety
/// `cfg` must be a live handle; `ablation` null or NUL-terminated;
/// `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mme_train(
    cfg: *const MmeConfig,
    ablation: *const c_char,
    out_json: *mut *mut c_char,
) -> MmeStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let ablation = if ablation.is_null() {
            None
        } else {
            Some(text(ablation, "ablation")?.parse::<Ablation>()?)
        };
        let m = pipeline::train(&cfg.inner, ablation, None)?;
        out_string(out_json, json(&m)?)
    })
}

/// Predicts every document of `input` (JSON lines) and writes unmerged
/// predictions to `output`.
///
/// # Safety
/// Handles must be live and paths NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mme_predict(
    cfg: *const MmeConfig,
    bundle: *const MmeBundle,
    input: *const c_char,
    output: *const c_char,
) -> MmeStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let bundle = handle(bundle, "bundle")?;
        let input = PathBuf::from(text(input, "input")?);
        let output = PathBuf::from(text(output, "output")?);
        let feats = pipeline::feature_store(&cfg.inner)?;
        let docs = pipeline::load_eval_docs(&cfg.inner, &input)?;
        let preds = pipeline::predict_docs(&cfg.inner, &bundle.inner, &docs, &feats)?;
        mmevent::data_model::write_jsonl(&output, &preds)?;
        Ok(())
    })
}

/// Merges and scores `predictions` against `gold`. A NaN `threshold` uses
/// the configured merge threshold. The report is returned as JSON.
///
/// # Safety
/// `cfg` must be live; paths NUL-terminated; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn mme_eval(
    cfg: *const MmeConfig,
    gold: *const c_char,
    predictions: *const c_char,
    threshold: f64,
    out_json: *mut *mut c_char,
) -> MmeStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let gold = PathBuf::from(text(gold, "gold")?);
        let preds = PathBuf::from(text(predictions, "predictions")?);
        let t = (!threshold.is_nan()).then_some(threshold);
        let m = pipeline::eval(&cfg.inner, &gold, &preds, t, None, None)?;
        out_string(out_json, json(&m.report)?)
    })
}

/// Releases a string returned through an `out_json` parameter.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mme_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
