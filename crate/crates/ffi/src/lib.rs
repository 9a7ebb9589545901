//! C ABI over the `xpert` library.
//!
//! Every fallible function returns an [`XpertStatus`]; on failure the message
//! is available from [`xpert_last_error`] on the same thread until the next
//! call. Strings handed out by this library are freed with
//! [`xpert_string_free`], models with [`xpert_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use xpert::experiment::{run, ExperimentConfig, TrainedModel};
use xpert::hard_concrete::HardConcrete;
use xpert::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum XpertStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Diverged = 6,
    Internal = 7,
}

/// A trained classifier with its mask parameters.
pub struct XpertModel {
    inner: TrainedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: XpertStatus, msg: impl Into<String>) -> XpertStatus {
    set_error(msg);
    status
}

fn status_of(err: &Error) -> XpertStatus {
    match err {
        Error::Config(_) => XpertStatus::Config,
        Error::Io { .. } | Error::NotFound(_) => XpertStatus::Io,
        Error::Parse { .. } => XpertStatus::Parse,
        Error::Diverged { .. } | Error::NonFinite { .. } => XpertStatus::Diverged,
        Error::Dimension { .. } | Error::Domain { .. } | Error::Contract(_) => XpertStatus::InvalidArgument,
    }
}

fn report(err: Error) -> XpertStatus {
    let status = status_of(&err);
    fail(status, err.to_string())
}

fn guarded(f: impl FnOnce() -> XpertStatus) -> XpertStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(XpertStatus::Internal, "internal panic"),
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, XpertStatus> {
    if p.is_null() {
        return Err(fail(XpertStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(XpertStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn rows_arg(x: *const f64, rows: usize, cols: usize) -> Result<Tensor, XpertStatus> {
    if x.is_null() {
        return Err(fail(XpertStatus::NullPointer, "input buffer is null"));
    }
    let data = std::slice::from_raw_parts(x, rows * cols).to_vec();
    Tensor::new(vec![rows, cols], data).map_err(report)
}

unsafe fn write_out(src: &[f64], out: *mut f64, out_len: usize) -> XpertStatus {
    if out.is_null() {
        return fail(XpertStatus::NullPointer, "output buffer is null");
    }
    if out_len < src.len() {
        return fail(
            XpertStatus::InvalidArgument,
            format!("output buffer holds {out_len} values, {} needed", src.len()),
        );
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    XpertStatus::Ok
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn xpert_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn xpert_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xpert_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint written by a training run.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpert_model_load(path: *const c_char, out: *mut *mut XpertModel) -> XpertStatus {
    guarded(|| {
        if out.is_null() {
            return fail(XpertStatus::NullPointer, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match TrainedModel::load(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(XpertModel { inner }));
                XpertStatus::Ok
            }
            Err(e) => report(e),
        }
    })
}

/// # Safety
/// `model` must be null or a handle from [`xpert_model_load`] or
/// [`xpert_run_experiment`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn xpert_model_free(model: *mut XpertModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input features per example, 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xpert_model_num_inputs(model: *const XpertModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.classifier.input_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn xpert_model_num_classes(model: *const XpertModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.classifier.num_classes())
}

/// Class probabilities for `rows` row-major inputs, already normalized the way
/// the model was trained. Writes `rows × num_classes` values.
///
/// # Safety
/// `x` must hold `rows × num_inputs` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn xpert_model_predict_proba(
    model: *const XpertModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> XpertStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return fail(XpertStatus::NullPointer, "model is null");
        };
        let x = match rows_arg(x, rows, m.inner.classifier.input_dim()) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match m.inner.classifier.predict_proba(&x) {
            Ok(p) => write_out(p.data(), out, out_len),
            Err(e) => report(e),
        }
    })
}

/// Deterministic evaluation mask of an inductive model for `rows` inputs.
/// Writes `rows × num_inputs` values in `[0, 1]`.
///
/// # Safety
/// `x` must hold `rows × num_inputs` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn xpert_model_mask(
    model: *const XpertModel,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> XpertStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return fail(XpertStatus::NullPointer, "model is null");
        };
        let x = match rows_arg(x, rows, m.inner.classifier.input_dim()) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match m.inner.log_alpha(&x).and_then(|la| m.inner.eval_mask(&la)) {
            Ok(z) => write_out(z.data(), out, out_len),
            Err(e) => report(e),
        }
    })
}

/// Parameters of the hard concrete distribution.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct XpertHardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl From<XpertHardConcrete> for HardConcrete {
    fn from(p: XpertHardConcrete) -> Self {
        HardConcrete { beta: p.beta, gamma: p.gamma, zeta: p.zeta }
    }
}

/// The usual parameters: temperature 2/3, stretch interval (−0.1, 1.1).
#[no_mangle]
pub extern "C" fn xpert_hard_concrete_default() -> XpertHardConcrete {
    let d = HardConcrete::default();
    XpertHardConcrete { beta: d.beta, gamma: d.gamma, zeta: d.zeta }
}

fn with_dist(params: XpertHardConcrete, f: impl FnOnce(HardConcrete) -> f64, out: *mut f64) -> XpertStatus {
    guarded(|| {
        if out.is_null() {
            return fail(XpertStatus::NullPointer, "out is null");
        }
        let dist = HardConcrete::from(params);
        if let Err(e) = dist.validate() {
            return report(e);
        }
        // SAFETY: checked non-null above; the caller guarantees it is writable.
        unsafe { *out = f(dist) };
        XpertStatus::Ok
    })
}

/// Gate value for `log α` and a uniform draw `u ∈ (0, 1)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpert_hard_concrete_gate(
    params: XpertHardConcrete,
    log_alpha: f64,
    u: f64,
    out: *mut f64,
) -> XpertStatus {
    if !(u > 0.0 && u < 1.0) {
        return fail(XpertStatus::InvalidArgument, format!("uniform draw {u} outside (0, 1)"));
    }
    with_dist(params, |d| d.gate(log_alpha, u), out)
}

/// Probability that the gate is nonzero.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpert_hard_concrete_active_probability(
    params: XpertHardConcrete,
    log_alpha: f64,
    out: *mut f64,
) -> XpertStatus {
    with_dist(params, |d| d.active_probability(log_alpha), out)
}

/// Noise-free gate used at evaluation time.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpert_hard_concrete_median_gate(
    params: XpertHardConcrete,
    log_alpha: f64,
    out: *mut f64,
) -> XpertStatus {
    with_dist(params, |d| d.median_gate(log_alpha), out)
}

/// Two-moons sample: `n × 2` coordinates into `points`, `n` labels into `labels`.
///
/// # Safety
/// `points` must hold `2n` values and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn xpert_make_moons(
    n: usize,
    noise_sd: f64,
    seed: u64,
    points: *mut f64,
    labels: *mut u32,
) -> XpertStatus {
    guarded(|| {
        if points.is_null() || labels.is_null() {
            return fail(XpertStatus::NullPointer, "output buffer is null");
        }
        let ds = match xpert::data::make_moons(n, noise_sd, seed) {
            Ok(ds) => ds,
            Err(e) => return report(e),
        };
        ptr::copy_nonoverlapping(ds.examples.data().as_ptr(), points, 2 * n);
        let ys = ds.labels.as_deref().unwrap_or_default();
        for (i, &y) in ys.iter().enumerate() {
            *labels.add(i) = y as u32;
        }
        XpertStatus::Ok
    })
}

/// Trains from a JSON config and writes its artifacts to the config's output
/// directory. `final_accuracy` and `model` may be null when not wanted.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; non-null out pointers must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn xpert_run_experiment(
    config_json: *const c_char,
    final_accuracy: *mut f64,
    model: *mut *mut XpertModel,
) -> XpertStatus {
    guarded(|| {
        if config_json.is_null() {
            return fail(XpertStatus::NullPointer, "config is null");
        }
        let Ok(text) = CStr::from_ptr(config_json).to_str() else {
            return fail(XpertStatus::InvalidArgument, "config is not UTF-8");
        };
        let summary = match ExperimentConfig::from_json(text).and_then(|c| run(&c)) {
            Ok(s) => s,
            Err(e) => return report(e),
        };
        if !final_accuracy.is_null() {
            *final_accuracy = summary.final_accuracy;
        }
        if !model.is_null() {
            *model = Box::into_raw(Box::new(XpertModel { inner: summary.model }));
        }
        XpertStatus::Ok
    })
}

/// Resolved copy of a JSON config with every default filled in. Free the
/// result with [`xpert_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xpert_resolve_config(config_json: *const c_char, out: *mut *mut c_char) -> XpertStatus {
    guarded(|| {
        if config_json.is_null() || out.is_null() {
            return fail(XpertStatus::NullPointer, "argument is null");
        }
        let Ok(text) = CStr::from_ptr(config_json).to_str() else {
            return fail(XpertStatus::InvalidArgument, "config is not UTF-8");
        };
        match ExperimentConfig::from_json(text).and_then(|c| c.resolve()) {
            Ok(c) => match CString::new(c.to_json()) {
                Ok(s) => {
                    *out = s.into_raw();
                    XpertStatus::Ok
                }
                Err(_) => fail(XpertStatus::Internal, "config contains NUL"),
            },
            Err(e) => report(e),
        }
    })
}
