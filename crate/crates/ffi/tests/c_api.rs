use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;
use std::ptr;

use mmevent::coref_eval::gold_as_predictions;
use mmevent::data_model::write_jsonl;
use mmevent::synth::{write_world, WorldConfig};
use mmevent_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn cpath(p: &Path) -> CString {
    c(p.to_str().unwrap())
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(mme_last_error()) }
        .to_string_lossy()
        .into_owned()
}

unsafe fn take(s: *mut c_char) -> String {
    let out = CStr::from_ptr(s).to_string_lossy().into_owned();
    mme_string_free(s);
    out
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(mme_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut cfg: *mut MmeConfig = ptr::null_mut();
    let st = unsafe { mme_config_load(ptr::null(), ptr::null(), 0, &mut cfg) };
    assert_eq!(st, MmeStatus::NullArgument);
    assert!(last_error().contains("path"));
    assert!(cfg.is_null());

    let mut out: *mut c_char = ptr::null_mut();
    let st = unsafe { mme_train(ptr::null(), ptr::null(), &mut out) };
    assert_eq!(st, MmeStatus::NullArgument);
    assert!(out.is_null());

    // Freeing null is a no-op.
    unsafe {
        mme_config_free(ptr::null_mut());
        mme_bundle_free(ptr::null_mut());
        mme_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_utf8_is_reported() {
    let bad = [0xffu8, 0xfe, 0];
    let mut cfg: *mut MmeConfig = ptr::null_mut();
    let st = unsafe { mme_config_load(bad.as_ptr().cast(), ptr::null(), 0, &mut cfg) };
    assert_eq!(st, MmeStatus::InvalidUtf8);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = cpath(&dir.path().join("absent.toml"));
    let mut cfg: *mut MmeConfig = ptr::null_mut();
    let st = unsafe { mme_config_load(p.as_ptr(), ptr::null(), 0, &mut cfg) };
    assert_eq!(st, MmeStatus::Io);
    assert!(!last_error().is_empty());
}

#[test]
fn training_without_cache_reports_missing_cache() {
    let dir = tempfile::tempdir().unwrap();
    let world = WorldConfig {
        train_docs: 4,
        heldout_docs: 1,
        ..WorldConfig::default()
    };
    let files = write_world(dir.path(), &world).unwrap();
    let p = cpath(&files.config);
    let mut cfg: *mut MmeConfig = ptr::null_mut();
    unsafe {
        assert_eq!(mme_config_load(p.as_ptr(), ptr::null(), 0, &mut cfg), MmeStatus::Ok);
        // The trainer refuses to run without a cache directory or entries.
        let mut out: *mut c_char = ptr::null_mut();
        let st = mme_train(cfg, ptr::null(), &mut out);
        assert_ne!(st, MmeStatus::Ok);
        assert!(
            matches!(st, MmeStatus::MissingCache | MmeStatus::Io | MmeStatus::Config),
            "{st:?}"
        );
        let bad = c("sideways");
        assert_eq!(mme_train(cfg, bad.as_ptr(), &mut out), MmeStatus::Config);
        assert!(last_error().contains("sideways"));
        mme_config_free(cfg);
    }
}

#[test]
fn full_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let world = WorldConfig {
        train_docs: 12,
        heldout_docs: 3,
        ..WorldConfig::default()
    };
    let files = write_world(dir.path(), &world).unwrap();
    let p = cpath(&files.config);
    let ov = c("seed=3");
    let ovs = [ov.as_ptr()];
    unsafe {
        let mut cfg: *mut MmeConfig = ptr::null_mut();
        assert_eq!(
            mme_config_load(p.as_ptr(), ovs.as_ptr(), 1, &mut cfg),
            MmeStatus::Ok,
            "{}",
            last_error()
        );

        let mut out: *mut c_char = ptr::null_mut();
        assert_eq!(mme_augment(cfg, &mut out), MmeStatus::Ok, "{}", last_error());
        let aug: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert!(aug["images"].as_u64().unwrap() > 0);

        assert_eq!(mme_train(cfg, ptr::null(), &mut out), MmeStatus::Ok, "{}", last_error());
        let man: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        let bundle_path = Path::new(man["dir"].as_str().unwrap()).join("bundle.json");
        assert!(bundle_path.exists());

        let mut bundle: *mut MmeBundle = ptr::null_mut();
        let bp = cpath(&bundle_path);
        assert_eq!(
            mme_bundle_load(bp.as_ptr(), &mut bundle),
            MmeStatus::Ok,
            "{}",
            last_error()
        );

        let input = cpath(&files.heldout_docs);
        let preds = dir.path().join("preds.jsonl");
        let pp = cpath(&preds);
        assert_eq!(
            mme_predict(cfg, bundle, input.as_ptr(), pp.as_ptr()),
            MmeStatus::Ok,
            "{}",
            last_error()
        );
        assert!(preds.exists());

        assert_eq!(
            mme_eval(cfg, input.as_ptr(), pp.as_ptr(), f64::NAN, &mut out),
            MmeStatus::Ok,
            "{}",
            last_error()
        );
        let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        assert!(report.is_object());

        // Gold events replayed as merged predictions score perfectly.
        let oracle = dir.path().join("oracle.jsonl");
        let cfg_rs = mmevent::config::LoadedConfig::from_file(&files.config, &[]).unwrap();
        let gold = mmevent::pipeline::load_eval_docs(&cfg_rs, &files.heldout_docs).unwrap();
        write_jsonl(&oracle, &gold_as_predictions(&gold)).unwrap();
        let op = cpath(&oracle);
        assert_eq!(
            mme_eval(cfg, input.as_ptr(), op.as_ptr(), 0.5, &mut out),
            MmeStatus::Ok,
            "{}",
            last_error()
        );
        let own: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
        for view in ["textual", "visual", "multimedia"] {
            for task in ["mention", "argument"] {
                assert_eq!(own[view][task]["f1"], 1.0, "{view} {task}");
            }
        }

        mme_bundle_free(bundle);
        mme_config_free(cfg);
    }
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mmevent.h")).unwrap();
    for sym in [
        "mme_last_error",
        "mme_version",
        "mme_config_load",
        "mme_config_free",
        "mme_bundle_load",
        "mme_bundle_free",
        "mme_augment",
        "mme_train",
        "mme_predict",
        "mme_eval",
        "mme_string_free",
        "MME_STATUS_MISSING_CACHE",
        "typedef struct MmeConfig MmeConfig",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}
