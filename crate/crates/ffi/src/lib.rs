//! C ABI for loading, training and querying bmim models.
//!
//! Every fallible call returns a [`BmimStatus`]; on failure the message is
//! available from [`bmim_last_error`] on the same thread. Strings handed out
//! by the library must be released with [`bmim_string_free`], models with
//! [`bmim_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use bmim::corpus::tokenize;
use bmim::{
    evaluate, load_checkpoint, load_dialogs, save_checkpoint, train, BmimError, Checkpoint, EvalOptions,
    LabelSource, Model, Protocol, TrainConfig,
};
use serde_json::{json, Value};

/// Result of a library call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BmimStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Data = 4,
    Checkpoint = 5,
    Io = 6,
    NonFinite = 7,
    Internal = 8,
}

impl From<&BmimError> for BmimStatus {
    fn from(e: &BmimError) -> Self {
        match e {
            BmimError::Config(_) => BmimStatus::Config,
            BmimError::Data(_) | BmimError::Parse { .. } => BmimStatus::Data,
            BmimError::Checkpoint(_) | BmimError::Version { .. } => BmimStatus::Checkpoint,
            BmimError::Io { .. } => BmimStatus::Io,
            BmimError::NonFinite(_) => BmimStatus::NonFinite,
            BmimError::Contract(_) | BmimError::Json(_) => BmimStatus::Internal,
        }
    }
}

/// Opaque model handle.
pub struct BmimModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

struct Failure(BmimStatus, String);

impl From<BmimError> for Failure {
    fn from(e: BmimError) -> Self {
        Failure(BmimStatus::from(&e), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BmimStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BmimStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {msg}"));
            BmimStatus::Internal
        }
    }
}

/// # Safety
/// `p` is null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(BmimStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BmimStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn read_opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        read_str(p, what).map(Some)
    }
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(BmimStatus::NullArgument, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

fn model_ref<'a>(model: *const BmimModel) -> Result<&'a BmimModel, Failure> {
    // SAFETY: callers pass a handle from this library that has not been freed
    unsafe { model.as_ref() }.ok_or_else(|| Failure(BmimStatus::NullArgument, "model is null".into()))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn bmim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bmim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bmim_model_load(dir: *const c_char, out: *mut *mut BmimModel) -> BmimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dir = read_str(dir, "dir")?;
        let ckpt = load_checkpoint(&PathBuf::from(dir))?;
        *out = Box::into_raw(Box::new(BmimModel { ckpt }));
        Ok(())
    })
}

/// Trains a model. `config_json` is a flat dotted-key config object (null
/// for defaults); `dev_path` may be null to select on the training data.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bmim_train(
    config_json: *const c_char,
    train_path: *const c_char,
    dev_path: *const c_char,
    out: *mut *mut BmimModel,
) -> BmimStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = match read_opt_str(config_json, "config_json")? {
            Some(text) => TrainConfig::from_flat_json(text)?,
            None => TrainConfig::default(),
        };
        let train_set = load_dialogs(read_str(train_path, "train_path")?, &LabelSource::Infer)?;
        let dev = match read_opt_str(dev_path, "dev_path")? {
            Some(p) => load_dialogs(p, &LabelSource::Fixed(train_set.label_space.clone()))?,
            None => train_set.clone(),
        };
        let ckpt = train(&cfg, &train_set, &dev)?;
        *out = Box::into_raw(Box::new(BmimModel { ckpt }));
        Ok(())
    })
}

/// Writes the model as a checkpoint directory.
///
/// # Safety
/// `model` is a live handle; `dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bmim_model_save(model: *const BmimModel, dir: *const c_char) -> BmimStatus {
    guard(|| {
        let m = model_ref(model)?;
        save_checkpoint(&m.ckpt, &PathBuf::from(read_str(dir, "dir")?))?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmim_model_free(model: *mut BmimModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn predict_value(model: &Model, dialog: &Value) -> Result<Value, Failure> {
    let bad = |m: &str| Failure(BmimStatus::Data, m.to_string());
    let utts = dialog
        .get("utterances")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("dialog needs an \"utterances\" array"))?;
    let mut tokens = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let t = if let Some(list) = u.get("tokens").and_then(Value::as_array) {
            list.iter().filter_map(Value::as_str).map(String::from).collect()
        } else if let Some(text) = u.get("text").and_then(Value::as_str) {
            tokenize(text)
        } else if let Some(text) = u.as_str() {
            tokenize(text)
        } else {
            return Err(bad(&format!("utterance {i} has neither text nor tokens")));
        };
        tokens.push(t);
    }
    let bundle = model.predict_tokens(&tokens)?;
    let (ps, pa) = bundle.predicted();
    let labels = &model.labels;
    let rows = |m: &bmim::tensor::Mat| -> Vec<Vec<f64>> { m.to_rows() };
    Ok(json!({
        "sentiment": ps.iter().map(|&k| &labels.sentiment_labels[k]).collect::<Vec<_>>(),
        "act": pa.iter().map(|&k| &labels.act_labels[k]).collect::<Vec<_>>(),
        "sentiment_probs": rows(&bundle.y_s),
        "act_probs": rows(&bundle.y_a),
    }))
}

/// Predicts one dialog. Input: `{"utterances": [{"text": ...} | {"tokens": [...]} | "..."]}`.
/// Output: `{"sentiment": [...], "act": [...], "sentiment_probs": [[...]], "act_probs": [[...]]}`.
///
/// # Safety
/// `model` is a live handle; `dialog_json` is NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn bmim_model_predict_json(
    model: *const BmimModel,
    dialog_json: *const c_char,
    out_json: *mut *mut c_char,
) -> BmimStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        let m = model_ref(model)?;
        let dialog: Value = serde_json::from_str(read_str(dialog_json, "dialog_json")?)
            .map_err(|e| Failure(BmimStatus::Data, format!("dialog_json: {e}")))?;
        let out = predict_value(&m.ckpt.model, &dialog)?;
        *out_json = into_c_string(out.to_string());
        Ok(())
    })
}

/// Scores the model on a JSONL corpus. `protocol` is `"mastodon"`,
/// `"dailydialog"`, or null for the one the model was trained with.
///
/// # Safety
/// `model` is a live handle; strings are null or NUL-terminated; `out_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn bmim_model_evaluate(
    model: *const BmimModel,
    data_path: *const c_char,
    protocol: *const c_char,
    out_json: *mut *mut c_char,
) -> BmimStatus {
    guard(|| {
        out_ptr(out_json, "out_json")?;
        let m = &model_ref(model)?.ckpt.model;
        let protocol = match read_opt_str(protocol, "protocol")? {
            Some(p) => p.parse::<Protocol>()?,
            None => m.config.train.protocol,
        };
        let data = load_dialogs(read_str(data_path, "data_path")?, &LabelSource::Fixed(m.labels.clone()))?;
        let report = evaluate(m, &data, &EvalOptions::protocol(protocol))?;
        let text = serde_json::to_string(&report).map_err(BmimError::from)?;
        *out_json = into_c_string(text);
        Ok(())
    })
}

/// Releases a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` is null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bmim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
