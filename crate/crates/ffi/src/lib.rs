//! C interface to the quakecast model and preprocessing helpers.
//!
//! Every fallible function returns a [`QcStatus`]; on failure a message is
//! available from [`qc_last_error`] on the same thread. Models are opaque
//! [`QcModel`] handles created by `qc_model_new`/`qc_model_load` and released
//! with `qc_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use quakecast::catalog::RegionGrid;
use quakecast::metrics;
use quakecast::model::{Architecture, Checkpoint, Model, ModelSpec};
use quakecast::series::zoh_impute;
use quakecast::train::{lr_schedule, TrainConfig};
use quakecast::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Domain = 4,
    Config = 5,
    Version = 6,
    Io = 7,
    Numeric = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct QcModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> QcStatus {
    match e {
        Error::Shape { .. } => QcStatus::Shape,
        Error::Domain(_) => QcStatus::Domain,
        Error::Config(_) | Error::Usage(_) | Error::Json(_) => QcStatus::Config,
        Error::Version(_) => QcStatus::Version,
        Error::NonFiniteGradient { .. } | Error::NonFiniteLoss { .. } => QcStatus::Numeric,
        Error::Io { .. } | Error::Csv(_) => QcStatus::Io,
    }
}

struct Fail(QcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(QcStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            QcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            QcStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(QcStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn qc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn qc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a model from a JSON spec, or the default hybrid spec when
/// `spec_json` is null.
///
/// # Safety
/// `spec_json` must be null or a NUL-terminated string; `out` must be valid
/// for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_new(spec_json: *const c_char, seed: u64, out: *mut *mut QcModel) -> QcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let spec = if spec_json.is_null() {
            ModelSpec::new(Architecture::CnnBilstmAm)
        } else {
            serde_json::from_str(str_arg(spec_json, "spec_json")?).map_err(Error::from)?
        };
        let inner = Model::build(&spec, seed)?;
        *out = Box::into_raw(Box::new(QcModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qc_model_free(model: *mut QcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a checkpoint (binary or JSON) into a new eval-mode model.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_load(path: *const c_char, out: *mut *mut QcModel) -> QcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let ck = Checkpoint::load(Path::new(str_arg(path, "path")?))?;
        let inner = Model::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(QcModel { inner }));
        Ok(())
    })
}

/// Writes a checkpoint; binary for a `.bin` extension, JSON otherwise.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qc_model_save(model: *const QcModel, path: *const c_char) -> QcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        model.inner.checkpoint().save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_param_count(model: *const QcModel, out: *mut usize) -> QcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = model.inner.count_parameters();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_window(model: *const QcModel, out: *mut usize) -> QcStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(out, "out")? = model.inner.spec().window;
        Ok(())
    })
}

/// The model's spec as JSON. Free the string with `qc_string_free`.
///
/// # Safety
/// `model` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_spec_json(model: *const QcModel, out: *mut *mut c_char) -> QcStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let text = serde_json::to_string(model.inner.spec()).map_err(Error::from)?;
        *out = CString::new(text).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Eval-mode predictions for `n_samples` row-major windows of length
/// `window`, written to `out[0..n_samples]`.
///
/// # Safety
/// `model` must be a live handle used by one thread at a time; `inputs` must
/// hold `n_samples * window` values and `out` room for `n_samples`.
#[no_mangle]
pub unsafe extern "C" fn qc_model_predict(
    model: *mut QcModel,
    inputs: *const f64,
    n_samples: usize,
    window: usize,
    out: *mut f64,
) -> QcStatus {
    guard(|| {
        let model = model.as_mut().ok_or_else(|| null("model"))?;
        let expected = model.inner.spec().window;
        if window != expected {
            return Err(Error::shape("predict window", &[n_samples, window], &[n_samples, expected]).into());
        }
        if n_samples == 0 {
            return Err(Fail(QcStatus::InvalidArgument, "n_samples must be ≥ 1".into()));
        }
        let total = n_samples
            .checked_mul(window)
            .ok_or_else(|| Fail(QcStatus::InvalidArgument, "input size overflows".into()))?;
        let x = slice_arg(inputs, total, "inputs")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (pred, _) = model.inner.predict(x, 256)?;
        slice::from_raw_parts_mut(out, n_samples).copy_from_slice(&pred);
        Ok(())
    })
}

/// RMSE, MAE and R² of `n` paired values. Any output pointer may be null.
///
/// # Safety
/// `y` and `y_hat` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn qc_metrics(
    y: *const f64,
    y_hat: *const f64,
    n: usize,
    rmse: *mut f64,
    mae: *mut f64,
    r2: *mut f64,
) -> QcStatus {
    guard(|| {
        let (y, p) = (slice_arg(y, n, "y")?, slice_arg(y_hat, n, "y_hat")?);
        let values = [
            (rmse, metrics::rmse as fn(&[f64], &[f64]) -> quakecast::Result<f64>),
            (mae, metrics::mae),
            (r2, metrics::r_squared),
        ];
        for (dst, f) in values {
            let v = f(y, p)?;
            if let Some(dst) = dst.as_mut() {
                *dst = v;
            }
        }
        Ok(())
    })
}

/// Zero-order-hold imputation of `n` values into `out` (may alias `values`).
///
/// # Safety
/// `values` and `out` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn qc_zoh_impute(values: *const f64, n: usize, out: *mut f64) -> QcStatus {
    guard(|| {
        let filled = zoh_impute(slice_arg(values, n, "values")?);
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy(filled.as_ptr(), out, n);
        Ok(())
    })
}

/// Region 1–9 of a point in the default study grid.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_assign_region(latitude: f64, longitude: f64, out: *mut u8) -> QcStatus {
    guard(|| {
        *out_arg(out, "out")? = RegionGrid::study_area().assign(latitude, longitude)?.index();
        Ok(())
    })
}

/// Learning rate of `epoch` under linear decay over `epochs` epochs.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn qc_lr_schedule(
    epoch: usize,
    epochs: usize,
    lr_start: f64,
    lr_end: f64,
    out: *mut f64,
) -> QcStatus {
    guard(|| {
        let config = TrainConfig {
            epochs,
            lr_start,
            lr_end,
            ..TrainConfig::default()
        };
        config.validate()?;
        if epoch >= epochs {
            return Err(Fail(QcStatus::InvalidArgument, format!("epoch {epoch} outside 0..{epochs}")));
        }
        *out_arg(out, "out")? = lr_schedule(epoch, &config);
        Ok(())
    })
}
