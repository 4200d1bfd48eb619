//! C interface to the airradar engine.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Every fallible call returns an [`ArdrStatus`];
//! on failure [`ardr_last_error`] describes the most recent error on the
//! calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use airradar::config::RunConfig;
use airradar::data::{generate_synthetic, load_csv, PreparedData, SynthConfig, READINGS_FILE, STATIONS_FILE};
use airradar::model::AirRadar;
use airradar::train::{evaluate, train_loop, BaselineSpec};
use airradar::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArdrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Format = 6,
    Dimension = 7,
    Numeric = 8,
    Validation = 9,
    Panic = 10,
}

/// A trained or loaded model.
pub struct ArdrModel {
    inner: AirRadar,
}

/// Station readings over time.
pub struct ArdrDataset {
    inner: airradar::data::Dataset,
}

/// Pollutant error summary in raw units; `mape` is a fraction.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct ArdrMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ArdrStatus {
    match e {
        Error::Dimension(_) => ArdrStatus::Dimension,
        Error::Numeric(_) => ArdrStatus::Numeric,
        Error::Config(_) => ArdrStatus::Config,
        Error::Usage(_) => ArdrStatus::InvalidArgument,
        Error::Validation(_) => ArdrStatus::Validation,
        Error::Parse { .. } => ArdrStatus::Parse,
        Error::Format(_) => ArdrStatus::Format,
        Error::Io { .. } => ArdrStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Arg(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ArdrStatus {
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return ArdrStatus::Ok,
        Ok(Err(Failure::Null(what))) => (ArdrStatus::NullPointer, format!("{what} is null")),
        Ok(Err(Failure::Arg(m))) => (ArdrStatus::InvalidArgument, m),
        Ok(Err(Failure::Lib(e))) => (status_of(&e), e.to_string()),
        Err(p) => {
            let m = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (ArdrStatus::Panic, format!("internal panic: {m}"))
        }
    };
    set_error(&msg);
    status
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn optional_text<'a>(p: *const c_char, what: &'static str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_slot<'a, T>(p: *mut *mut T) -> Result<&'a mut *mut T, Failure> {
    let slot = p.as_mut().ok_or(Failure::Null("output pointer"))?;
    *slot = ptr::null_mut();
    Ok(slot)
}

/// Message for the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ardr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ardr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `stations.csv` and `readings.csv` from directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ardr_dataset_load(dir: *const c_char, out: *mut *mut ArdrDataset) -> ArdrStatus {
    guard(|| {
        let slot = out_slot(out)?;
        let dir = PathBuf::from(text(dir, "dir")?);
        let inner = load_csv(&dir.join(STATIONS_FILE), &dir.join(READINGS_FILE))?;
        *slot = Box::into_raw(Box::new(ArdrDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic dataset from a TOML document (must set `seed`).
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ardr_dataset_synthetic(config_toml: *const c_char, out: *mut *mut ArdrDataset) -> ArdrStatus {
    guard(|| {
        let slot = out_slot(out)?;
        let cfg = SynthConfig::from_toml_str(text(config_toml, "config_toml")?)?;
        let inner = generate_synthetic(&cfg)?;
        *slot = Box::into_raw(Box::new(ArdrDataset { inner }));
        Ok(())
    })
}

/// Number of stations; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ardr_dataset_stations(ds: *const ArdrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.nodes())
}

/// Number of snapshots; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn ardr_dataset_snapshots(ds: *const ArdrDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.snapshots())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ardr_dataset_free(ds: *mut ArdrDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains a model on `ds`. `config_toml` may be null for defaults.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_toml` null or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_train(
    ds: *const ArdrDataset,
    config_toml: *const c_char,
    out: *mut *mut ArdrModel,
) -> ArdrStatus {
    guard(|| {
        let slot = out_slot(out)?;
        let ds = handle(ds, "dataset")?;
        let cfg = match optional_text(config_toml, "config_toml")? {
            Some(t) => RunConfig::from_toml_str(t)?,
            None => RunConfig::default(),
        };
        let data = PreparedData::fit(ds.inner.clone(), cfg.model.history)?;
        let mut model = AirRadar::new(
            cfg.model.clone(),
            data.dataset().stations.clone(),
            data.stats().to_vec(),
            cfg.train.seed,
        )?;
        train_loop(&mut model, &data, &cfg.train, None, None)?;
        *slot = Box::into_raw(Box::new(ArdrModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_load(path: *const c_char, out: *mut *mut ArdrModel) -> ArdrStatus {
    guard(|| {
        let slot = out_slot(out)?;
        let inner = AirRadar::load(text(path, "path")?.as_ref())?;
        *slot = Box::into_raw(Box::new(ArdrModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_save(model: *const ArdrModel, path: *const c_char) -> ArdrStatus {
    guard(|| {
        let m = handle(model, "model")?;
        m.inner.save(text(path, "path")?.as_ref())?;
        Ok(())
    })
}

/// Number of stations the model is bound to; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_stations(model: *const ArdrModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.stations().len())
}

/// Reconstructs the pollutant at every station for snapshot `time`, treating
/// stations with `mask[i] != 0` as unobserved. Writes `n` raw-unit values.
///
/// # Safety
/// `mask` and `out_values` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_infer(
    model: *const ArdrModel,
    ds: *const ArdrDataset,
    time: usize,
    mask: *const u8,
    n: usize,
    out_values: *mut f64,
) -> ArdrStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let ds = handle(ds, "dataset")?;
        if mask.is_null() {
            return Err(Failure::Null("mask"));
        }
        if out_values.is_null() {
            return Err(Failure::Null("out_values"));
        }
        if n != m.stations().len() {
            return Err(Failure::Arg(format!("n = {n} but the model has {} stations", m.stations().len())));
        }
        let mask: Vec<bool> = std::slice::from_raw_parts(mask, n).iter().map(|&b| b != 0).collect();
        if !mask.iter().any(|&b| b) {
            return Err(Failure::Arg("mask must hide at least one station".into()));
        }
        m.check_stations(&ds.inner.stations)?;
        let data = PreparedData::with_stats(ds.inner.clone(), m.config().history, m.channels())?;
        if time < data.history() || time >= ds.inner.snapshots() {
            return Err(Failure::Arg(format!("time {time} has no full history")));
        }
        let pred = m.predict(&data.batch(&[time], &[mask])?)?;
        let d = pred.last_dim();
        let out = std::slice::from_raw_parts_mut(out_values, n);
        for (i, o) in out.iter_mut().enumerate() {
            *o = m.channels()[0].denormalize(pred.data()[i * d]);
        }
        Ok(())
    })
}

/// Scores the model on the test split at one mask ratio. When
/// `baseline_knn`/`baseline_idw` are non-null they receive KNN (k = 5) and
/// IDW (p = 2) scores on the same masks.
///
/// # Safety
/// Handles must be live; every non-null output pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_evaluate(
    model: *const ArdrModel,
    ds: *const ArdrDataset,
    ratio: f64,
    seed: u64,
    out: *mut ArdrMetrics,
    baseline_knn: *mut ArdrMetrics,
    baseline_idw: *mut ArdrMetrics,
) -> ArdrStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let ds = handle(ds, "dataset")?;
        let out = out.as_mut().ok_or(Failure::Null("out"))?;
        m.check_stations(&ds.inner.stations)?;
        let data = PreparedData::with_stats(ds.inner.clone(), m.config().history, m.channels())?;
        let times: Vec<usize> = data.splits().test.clone().collect();
        let want_baselines = !baseline_knn.is_null() || !baseline_idw.is_null();
        let ev = evaluate(Some(m), &data, &times, ratio, seed, want_baselines.then(BaselineSpec::default))?;
        let conv = |x: &airradar::train::Metrics| ArdrMetrics {
            mae: x.mae,
            rmse: x.rmse,
            mape: x.mape,
        };
        *out = conv(&ev.rows[0].1);
        if let Some(k) = baseline_knn.as_mut() {
            *k = conv(&ev.rows[1].1);
        }
        if let Some(i) = baseline_idw.as_mut() {
            *i = conv(&ev.rows[2].1);
        }
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ardr_model_free(model: *mut ArdrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
