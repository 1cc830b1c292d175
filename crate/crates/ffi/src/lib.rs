//! C ABI over the transaction store, feature timelines, metrics and the
//! stage pipeline.
//!
//! Every fallible call returns an [`ImStatus`]. On failure the message is
//! kept per thread and read with [`im_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function; strings returned
//! through `out` parameters are released with [`im_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use intention_monitor::chain::TxStore;
use intention_monitor::features::{feature_timeline, full_schema, FeatureTimeline};
use intention_monitor::metrics::{evaluate, PredictionTrace};
use intention_monitor::paths::PathConfigs;
use intention_monitor::pipeline::{Pipeline, PipelineConfig};
use intention_monitor::Error;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Bad configuration or argument value.
    InvalidArgument = 3,
    /// File system error.
    Io = 4,
    /// Input data could not be parsed or is inconsistent.
    Data = 5,
    /// Address, transaction or artifact not found.
    NotFound = 6,
    Internal = 7,
    /// A Rust panic was caught at the boundary.
    Panic = 8,
}

impl From<&Error> for ImStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => ImStatus::Io,
            Error::Config(_) | Error::InvalidInput(_) => ImStatus::InvalidArgument,
            Error::AddressNotFound(_) | Error::TxNotFound(_) | Error::MissingArtifact { .. } => ImStatus::NotFound,
            Error::Internal(_) => ImStatus::Internal,
            _ => ImStatus::Data,
        }
    }
}

/// Parsed transaction store.
pub struct ImStore(TxStore);

/// Hourly feature rows of one address in the full schema.
pub struct ImTimeline(FeatureTimeline);

/// Stage runner bound to one output directory.
pub struct ImPipeline(Pipeline);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

struct Fail(ImStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(ImStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ImStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ImStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            ImStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(ImStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ImStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn to_c(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(ImStatus::Internal, "string contains NUL".into()))
}

fn json<T: serde::Serialize>(v: &T) -> Result<*mut c_char, Fail> {
    to_c(serde_json::to_string(v).map_err(|e| Fail(ImStatus::Internal, e.to_string()))?)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn im_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn im_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn im_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a `transactions.jsonl` file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn im_store_open(path: *const c_char, out: *mut *mut ImStore) -> ImStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(ImStore(TxStore::load(path)?)));
        Ok(())
    })
}

/// Parses JSONL transaction records from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn im_store_from_jsonl(data: *const u8, len: usize, out: *mut *mut ImStore) -> ImStatus {
    guard(|| {
        let bytes = slice_arg(data, len, "data")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(ImStore(TxStore::parse(bytes)?)));
        Ok(())
    })
}

/// # Safety
/// `store` must come from `im_store_open`/`im_store_from_jsonl` or be null.
#[no_mangle]
pub unsafe extern "C" fn im_store_free(store: *mut ImStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Accepted transaction and distinct address counts.
///
/// # Safety
/// `store` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn im_store_counts(store: *const ImStore, n_tx: *mut usize, n_addr: *mut usize) -> ImStatus {
    guard(|| {
        let s = &handle(store, "store")?.0;
        if let Some(n) = n_tx.as_mut() {
            *n = s.tx_count();
        }
        if let Some(n) = n_addr.as_mut() {
            *n = s.address_count();
        }
        Ok(())
    })
}

/// Full-schema column names as a JSON array of strings.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn im_feature_names_json(out: *mut *mut c_char) -> ImStatus {
    guard(|| {
        *out_arg(out, "out")? = json(&full_schema())?;
        Ok(())
    })
}

/// Hourly feature timeline of `address` over `hours` steps with default path settings.
///
/// # Safety
/// `store` must be a live handle, `address` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn im_timeline_new(
    store: *const ImStore,
    address: *const c_char,
    hours: usize,
    out: *mut *mut ImTimeline,
) -> ImStatus {
    guard(|| {
        let s = &handle(store, "store")?.0;
        let address = str_arg(address, "address")?;
        let out = out_arg(out, "out")?;
        if hours == 0 {
            return Err(Fail(ImStatus::InvalidArgument, "hours must be positive".into()));
        }
        let tl = feature_timeline(s, address, &PathConfigs::default(), hours)?;
        *out = Box::into_raw(Box::new(ImTimeline(tl)));
        Ok(())
    })
}

/// # Safety
/// `tl` must come from `im_timeline_new` or be null.
#[no_mangle]
pub unsafe extern "C" fn im_timeline_free(tl: *mut ImTimeline) {
    if !tl.is_null() {
        drop(Box::from_raw(tl));
    }
}

/// Row count and row width.
///
/// # Safety
/// `tl` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn im_timeline_shape(tl: *const ImTimeline, rows: *mut usize, cols: *mut usize) -> ImStatus {
    guard(|| {
        let t = &handle(tl, "timeline")?.0;
        if let Some(r) = rows.as_mut() {
            *r = t.rows.len();
        }
        if let Some(c) = cols.as_mut() {
            *c = t.rows.first().map_or(0, Vec::len);
        }
        Ok(())
    })
}

/// Copies the rows, row-major, into `buf` of `len` doubles (at least rows x cols).
///
/// # Safety
/// `tl` must be a live handle and `buf` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn im_timeline_copy(tl: *const ImTimeline, buf: *mut f64, len: usize) -> ImStatus {
    guard(|| {
        let t = &handle(tl, "timeline")?.0;
        let need: usize = t.rows.iter().map(Vec::len).sum();
        if len < need {
            return Err(Fail(ImStatus::InvalidArgument, format!("buffer holds {len} values, need {need}")));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (chunk, row) in dst.chunks_mut(t.rows.first().map_or(1, Vec::len)).zip(&t.rows) {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Evaluates `n_addr` traces of `n_steps` probabilities each (row-major) and
/// writes the report as JSON.
///
/// # Safety
/// `p` must hold `n_addr * n_steps` doubles, `labels` `n_addr` bytes, `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn im_evaluate_json(
    p: *const f64,
    labels: *const u8,
    n_addr: usize,
    n_steps: usize,
    out: *mut *mut c_char,
) -> ImStatus {
    guard(|| {
        let total = n_addr
            .checked_mul(n_steps)
            .ok_or_else(|| Fail(ImStatus::InvalidArgument, "size overflow".into()))?;
        let p = slice_arg(p, total, "p")?;
        let labels = slice_arg(labels, n_addr, "labels")?;
        let out = out_arg(out, "out")?;
        if labels.iter().any(|&l| l > 1) {
            return Err(Fail(ImStatus::InvalidArgument, "labels must be 0 or 1".into()));
        }
        let traces: Vec<PredictionTrace> = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| PredictionTrace {
                address: i.to_string(),
                label,
                p: p[i * n_steps..(i + 1) * n_steps].to_vec(),
            })
            .collect();
        *out = json(&evaluate(&traces)?)?;
        Ok(())
    })
}

/// Opens a pipeline on `out_dir` with an optional JSON config file (null for defaults).
///
/// # Safety
/// `out_dir` must be NUL-terminated, `config` NUL-terminated or null, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn im_pipeline_open(
    out_dir: *const c_char,
    config: *const c_char,
    out: *mut *mut ImPipeline,
) -> ImStatus {
    guard(|| {
        let dir = str_arg(out_dir, "out_dir")?;
        let out = out_arg(out, "out")?;
        let cfg = if config.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(&PathBuf::from(str_arg(config, "config")?))?
        };
        *out = Box::into_raw(Box::new(ImPipeline(Pipeline::new(dir, cfg)?)));
        Ok(())
    })
}

/// # Safety
/// `p` must come from `im_pipeline_open` or be null.
#[no_mangle]
pub unsafe extern "C" fn im_pipeline_free(p: *mut ImPipeline) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Runs one stage by name (`synth`, `ingest`, ..., `eval`, or `run` for
/// ingest through eval).
///
/// # Safety
/// `p` must be a live handle and `stage` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn im_pipeline_stage(p: *const ImPipeline, stage: *const c_char) -> ImStatus {
    guard(|| {
        let p = &handle(p, "pipeline")?.0;
        match str_arg(stage, "stage")? {
            "synth" => p.synth()?,
            "ingest" => drop(p.ingest()?),
            "paths" => p.paths()?,
            "features" => p.features()?,
            "select" => drop(p.select()?),
            "segment" => drop(p.segment()?),
            "train" => drop(p.train()?),
            "predict" => drop(p.predict()?),
            "eval" => drop(p.eval()?),
            "run" => drop(p.run()?),
            other => return Err(Fail(ImStatus::InvalidArgument, format!("unknown stage {other:?}"))),
        }
        Ok(())
    })
}

/// `explain` for one address, as JSON.
///
/// # Safety
/// `p` must be a live handle, `address` NUL-terminated, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn im_pipeline_explain_json(
    p: *const ImPipeline,
    address: *const c_char,
    out: *mut *mut c_char,
) -> ImStatus {
    guard(|| {
        let p = &handle(p, "pipeline")?.0;
        let address = str_arg(address, "address")?;
        let out = out_arg(out, "out")?;
        *out = json(&p.explain(address)?)?;
        Ok(())
    })
}
