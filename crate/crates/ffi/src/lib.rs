//! C ABI for loading fusion checkpoints, running inference and the
//! metric/trilateration helpers.
//!
//! Every function returns an [`MmlocStatus`]; on failure the message is
//! available from [`mmloc_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mmloc::checkpoint::load_model;
use mmloc::curation::MultiModalWindow;
use mmloc::fusion::FusionModel;
use mmloc::tensor::Matrix;
use mmloc::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmlocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Panic = 6,
}

/// Opaque handle to a loaded model.
pub struct MmlocModel {
    inner: FusionModel,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MmlocSummary {
    pub mean: f64,
    pub median: f64,
    pub cdf90: f64,
    pub count: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MmlocStatus {
    match e {
        Error::Io { .. } => MmlocStatus::Io,
        Error::Format { .. } => MmlocStatus::Format,
        Error::NonFinite { .. } | Error::Numeric(_) | Error::Diverged { .. } => MmlocStatus::Numeric,
        _ => MmlocStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (MmlocStatus, String)>) -> MmlocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MmlocStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MmlocStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (MmlocStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (MmlocStatus, String) {
    (MmlocStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (MmlocStatus, String) {
    (MmlocStatus::InvalidArgument, msg.into())
}

/// Message for the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn mmloc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a JSON checkpoint. Free the handle with [`mmloc_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmloc_model_load(path: *const c_char, out: *mut *mut MmlocModel) -> MmlocStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let inner = load_model(Path::new(path), None).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(MmlocModel { inner }));
        Ok(())
    })
}

/// Releases a handle from [`mmloc_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`mmloc_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmloc_model_free(model: *mut MmlocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

unsafe fn model_ref<'a>(model: *const MmlocModel) -> Result<&'a FusionModel, (MmlocStatus, String)> {
    model.as_ref().map(|m| &m.inner).ok_or_else(|| null("model"))
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmloc_model_num_streams(model: *const MmlocModel, out: *mut usize) -> MmlocStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.num_streams();
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmloc_model_window_len(model: *const MmlocModel, out: *mut usize) -> MmlocStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.config.window_len;
        Ok(())
    })
}

/// Feature dimension of stream `stream`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmloc_model_stream_dim(model: *const MmlocModel, stream: usize, out: *mut usize) -> MmlocStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = *m
            .config
            .input_dims
            .get(stream)
            .ok_or_else(|| invalid(format!("stream {stream} out of range")))?;
        *out.as_mut().ok_or_else(|| null("out"))? = d;
        Ok(())
    })
}

/// Estimates the position for one window.
///
/// `streams[m]` points at `window_len × dim(m)` curated features, row-major
/// with one row per time step, in the model's stream order. `out_xy`
/// receives two values; `out_alpha` (nullable) receives one importance
/// weight per stream.
///
/// # Safety
/// All pointers must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn mmloc_model_predict(
    model: *const MmlocModel,
    streams: *const *const f64,
    num_streams: usize,
    out_xy: *mut f64,
    out_alpha: *mut f64,
) -> MmlocStatus {
    guard(|| {
        let m = model_ref(model)?;
        if streams.is_null() {
            return Err(null("streams"));
        }
        if out_xy.is_null() {
            return Err(null("out_xy"));
        }
        if num_streams != m.num_streams() {
            return Err(invalid(format!("model has {} streams, got {num_streams}", m.num_streams())));
        }
        let t = m.config.window_len;
        let mut window = MultiModalWindow {
            streams: Vec::with_capacity(num_streams),
            timestamps: (0..t).map(|i| i as f64).collect(),
            target: [0.0; 2],
        };
        let ptrs = std::slice::from_raw_parts(streams, num_streams);
        for (k, (&p, (&sensor, &d))) in ptrs.iter().zip(m.config.sensors.iter().zip(&m.config.input_dims)).enumerate() {
            if p.is_null() {
                return Err(null(&format!("streams[{k}]")));
            }
            let data = std::slice::from_raw_parts(p, t * d).to_vec();
            window.streams.push((sensor, Matrix::new(t, d, data).map_err(lib_err)?));
        }
        let (xy, alpha) = m.predict_window(&window).map_err(lib_err)?;
        if !xy.iter().all(|v| v.is_finite()) {
            return Err((MmlocStatus::Numeric, "non-finite prediction".into()));
        }
        std::slice::from_raw_parts_mut(out_xy, 2).copy_from_slice(&xy);
        if !out_alpha.is_null() {
            std::slice::from_raw_parts_mut(out_alpha, num_streams).copy_from_slice(alpha.as_slice());
        }
        Ok(())
    })
}

/// Mean, median and 90th-percentile of `n` localization errors.
///
/// # Safety
/// `errors` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmloc_summarize(errors: *const f64, n: usize, out: *mut MmlocSummary) -> MmlocStatus {
    guard(|| {
        if errors.is_null() {
            return Err(null("errors"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = mmloc::metrics::summarize(std::slice::from_raw_parts(errors, n)).map_err(lib_err)?;
        *out = MmlocSummary {
            mean: s.mean,
            median: s.median,
            cdf90: s.cdf90,
            count: s.count,
        };
        Ok(())
    })
}

/// Position from `n` ranges to anchors given as `x0, y0, x1, y1, …`.
/// `out_residual` (nullable) receives the RMS range residual.
///
/// # Safety
/// `anchors_xy` must hold `2n` values, `ranges` `n`, `out_xy` two.
#[no_mangle]
pub unsafe extern "C" fn mmloc_trilaterate(
    anchors_xy: *const f64,
    ranges: *const f64,
    n: usize,
    out_xy: *mut f64,
    out_residual: *mut f64,
) -> MmlocStatus {
    guard(|| {
        if anchors_xy.is_null() || ranges.is_null() || out_xy.is_null() {
            return Err(null("anchors_xy, ranges or out_xy"));
        }
        let flat = std::slice::from_raw_parts(anchors_xy, 2 * n);
        let anchors: Vec<[f64; 2]> = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let r = mmloc::baselines::trilaterate(std::slice::from_raw_parts(ranges, n), &anchors, None).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(out_xy, 2).copy_from_slice(&r.position);
        if let Some(res) = out_residual.as_mut() {
            *res = r.residual;
        }
        Ok(())
    })
}
