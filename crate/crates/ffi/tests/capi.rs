use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bmim::{generate_synthetic, SyntheticSpec};
use bmim_ffi::*;

const SMALL: &str = r#"{"model.d_w": 8, "model.d": 8, "model.d_e": 8, "bmin.hops": 1, "train.epochs": 2, "train.batch_size": 4}"#;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(bmim_last_error()) }.to_str().unwrap().to_string()
}

fn take(s: *mut std::ffi::c_char) -> String {
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    unsafe { bmim_string_free(s) };
    out
}

fn corpus(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    generate_synthetic(&SyntheticSpec::high_signal(n), seed)
        .unwrap()
        .write_jsonl(&path)
        .unwrap();
    path
}

fn trained(dir: &Path) -> *mut BmimModel {
    let train = corpus(dir, "train.jsonl", 6, 1);
    let mut model = ptr::null_mut();
    let status = unsafe {
        bmim_train(
            c(SMALL).as_ptr(),
            c(train.to_str().unwrap()).as_ptr(),
            ptr::null(),
            &mut model,
        )
    };
    assert_eq!(status, BmimStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn train_predict_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained(dir.path());
    let dialog = c(r#"{"utterances": [{"text": "act_question w1 w2"}, {"tokens": ["act_answer", "w3"]}, "act_thanking w4"]}"#);

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { bmim_model_predict_json(model, dialog.as_ptr(), &mut out) }, BmimStatus::Ok);
    let first = take(out);
    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    assert_eq!(v["sentiment"].as_array().unwrap().len(), 3);
    assert_eq!(v["act_probs"][0].as_array().unwrap().len(), 5);

    let ck = dir.path().join("ck");
    assert_eq!(unsafe { bmim_model_save(model, c(ck.to_str().unwrap()).as_ptr()) }, BmimStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { bmim_model_load(c(ck.to_str().unwrap()).as_ptr(), &mut loaded) }, BmimStatus::Ok);
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { bmim_model_predict_json(loaded, dialog.as_ptr(), &mut out) }, BmimStatus::Ok);
    assert_eq!(take(out), first);

    let data = corpus(dir.path(), "dev.jsonl", 3, 2);
    let mut out = ptr::null_mut();
    let status = unsafe {
        bmim_model_evaluate(loaded, c(data.to_str().unwrap()).as_ptr(), c("mastodon").as_ptr(), &mut out)
    };
    assert_eq!(status, BmimStatus::Ok, "{}", last_error());
    let report: serde_json::Value = serde_json::from_str(&take(out)).unwrap();
    assert!(report["sentiment"]["f1"].as_f64().unwrap() >= 0.0);

    unsafe {
        bmim_model_free(model);
        bmim_model_free(loaded);
    }
}

#[test]
fn failures_set_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = ptr::null_mut();
    let missing = dir.path().join("nope");
    let status = unsafe { bmim_model_load(c(missing.to_str().unwrap()).as_ptr(), &mut model) };
    assert_eq!(status, BmimStatus::Io);
    assert!(last_error().contains("nope"));
    assert!(model.is_null());

    let train = corpus(dir.path(), "t.jsonl", 2, 1);
    let status = unsafe {
        bmim_train(
            c(r#"{"model.width": 3}"#).as_ptr(),
            c(train.to_str().unwrap()).as_ptr(),
            ptr::null(),
            &mut model,
        )
    };
    assert_eq!(status, BmimStatus::Config);
    assert!(last_error().contains("model.width"));

    let model = trained(dir.path());
    assert!(last_error().is_empty());
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(
        &bad,
        r#"{"dialog_id": "x", "utterances": [{"text": "hi", "sentiment": "ecstatic", "act": "statement"}]}"#,
    )
    .unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { bmim_model_evaluate(model, c(bad.to_str().unwrap()).as_ptr(), ptr::null(), &mut out) };
    assert_eq!(status, BmimStatus::Data);
    assert!(last_error().contains("ecstatic"));
    assert!(out.is_null());

    let mut out = ptr::null_mut();
    let status = unsafe { bmim_model_predict_json(model, c("{\"turns\": []}").as_ptr(), &mut out) };
    assert_eq!(status, BmimStatus::Data);
    unsafe { bmim_model_free(model) };
}

#[test]
fn version_is_nonempty() {
    let v = unsafe { CStr::from_ptr(bmim_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn header() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("bmim.h")
}

#[test]
fn header_declares_the_api() {
    let h = std::fs::read_to_string(header()).unwrap();
    for sym in [
        "bmim_model_load",
        "bmim_model_free",
        "bmim_model_predict_json",
        "bmim_model_evaluate",
        "bmim_model_save",
        "bmim_train",
        "bmim_string_free",
        "bmim_last_error",
        "bmim_version",
        "typedef struct BmimModel BmimModel",
        "BMIM_STATUS_OK = 0",
    ] {
        assert!(h.contains(sym), "header lacks {sym}");
    }
}

/// Compiles a C client against the header and links it with the static library.
#[test]
fn c_client_links_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include <string.h>
#include "bmim.h"
int main(void) {
    BmimModel *m = NULL;
    BmimStatus s = bmim_model_load("/nonexistent/ckpt", &m);
    if (s != BMIM_STATUS_IO || m != NULL) return 1;
    if (strlen(bmim_last_error()) == 0) return 2;
    bmim_model_free(NULL);
    bmim_string_free(NULL);
    printf("%s\n", bmim_version());
    return 0;
}
"#,
    )
    .unwrap();
    let include = header().parent().unwrap().to_path_buf();
    let syntax = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(&include)
        .arg(&src)
        .status()
        .expect("a C compiler is required");
    assert!(syntax.success());

    // target/<profile>/deps/capi-xxxx -> target/<profile>/libbmim_ffi.a
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().unwrap().parent().unwrap().join("libbmim_ffi.a");
    if !lib.exists() {
        eprintln!("skipping link step: {} not built", lib.display());
        return;
    }
    let bin = dir.path().join("client");
    let built = Command::new("cc")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(built.success());
    let out = Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "client exited with {:?}", out.status);
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
