//! C ABI over the segsense metric, fitting and statistics routines.
//!
//! Every fallible function returns a `SegsenseStatus`; on failure a message
//! is available from `segsense_last_error` on the same thread. Masks are
//! opaque handles created with `segsense_mask_new` and released with
//! `segsense_mask_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use segsense::fitting::{self, AxisUnits, ExpFit, SurfaceFit, SurfaceSample, Trace};
use segsense::mask::{self, Mask, SoftMask};
use segsense::metrics::{self, MetricConfig, Spacing};
use segsense::sweep;
use segsense::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegsenseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Empty = 4,
    RankDeficient = 5,
    NotConverged = 6,
    UnitMismatch = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegsenseUnits {
    Index = 0,
    Images = 1,
}

impl From<SegsenseUnits> for AxisUnits {
    fn from(u: SegsenseUnits) -> Self {
        match u {
            SegsenseUnits::Index => AxisUnits::Index,
            SegsenseUnits::Images => AxisUnits::Images,
        }
    }
}

impl From<AxisUnits> for SegsenseUnits {
    fn from(u: AxisUnits) -> Self {
        match u {
            AxisUnits::Index => SegsenseUnits::Index,
            AxisUnits::Images => SegsenseUnits::Images,
        }
    }
}

/// Binary ground-truth mask.
pub struct SegsenseMask(Mask);

/// Metric parameters. Zero-initialized fields are invalid; start from
/// `segsense_metric_config_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SegsenseMetricConfig {
    pub beta: f64,
    pub delta: f64,
    pub bce_clamp: f64,
    pub spacing_dy: f64,
    pub spacing_dx: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegsenseMetrics {
    pub dice: f64,
    pub f_score: f64,
    pub iou: f64,
    pub rmse: f64,
    pub loss_bce: f64,
    pub loss_dice: f64,
    /// NaN when `hausdorff_defined` is 0.
    pub hausdorff: f64,
    pub hausdorff_defined: u8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegsenseExpFit {
    pub a: f64,
    pub esr: f64,
    pub c: f64,
    pub residual_rms: f64,
    pub iterations: u32,
    pub degenerate: u8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegsenseSurfaceFit {
    pub p00: f64,
    pub p10: f64,
    pub p01: f64,
    pub residual_rms: f64,
    pub units: SegsenseUnits,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegsenseBoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub stddev: f64,
    pub n: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SegsenseStatus {
    match e {
        Error::DimensionMismatch { .. } => SegsenseStatus::DimensionMismatch,
        Error::Empty(_) | Error::InsufficientData(_) => SegsenseStatus::Empty,
        Error::RankDeficient(_) => SegsenseStatus::RankDeficient,
        Error::NotConverged { .. } => SegsenseStatus::NotConverged,
        Error::UnitMismatch { .. } => SegsenseStatus::UnitMismatch,
        Error::InvalidArgument(_) | Error::IndexOutOfRange { .. } | Error::CountNotOnAxis(_) => {
            SegsenseStatus::InvalidArgument
        }
        _ => SegsenseStatus::Internal,
    }
}

fn fail(status: SegsenseStatus, msg: impl Into<String>) -> SegsenseStatus {
    set_error(msg.into());
    status
}

fn from_error(e: Error) -> SegsenseStatus {
    fail(status_of(&e), e.to_string())
}

/// Runs `f`, mapping panics to `Internal`.
fn guard(f: impl FnOnce() -> SegsenseStatus) -> SegsenseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SegsenseStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], SegsenseStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(SegsenseStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(SegsenseStatus::NullPointer, concat!(stringify!($p), " is null"));
        })+
    };
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn segsense_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library name and version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn segsense_version() -> *const c_char {
    static VERSION: &CStr =
        match CStr::from_bytes_with_nul(concat!("segsense ", env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
            Ok(v) => v,
            Err(_) => panic!("version string"),
        };
    VERSION.as_ptr()
}

#[no_mangle]
pub extern "C" fn segsense_metric_config_default() -> SegsenseMetricConfig {
    let c = MetricConfig::default();
    SegsenseMetricConfig {
        beta: c.beta,
        delta: c.delta,
        bce_clamp: c.bce_clamp,
        spacing_dy: c.spacing.dy,
        spacing_dx: c.spacing.dx,
    }
}

/// Creates a mask from `width * height` row-major bytes; nonzero is foreground.
///
/// # Safety
/// `data` must point to `width * height` bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_mask_new(
    width: usize,
    height: usize,
    data: *const u8,
    out: *mut *mut SegsenseMask,
) -> SegsenseStatus {
    guard(|| {
        non_null!(out);
        let Some(len) = width.checked_mul(height) else {
            return fail(SegsenseStatus::InvalidArgument, "mask size overflows");
        };
        let bytes = match slice(data, len, "data") {
            Ok(b) => b,
            Err(s) => return s,
        };
        let values = bytes.iter().map(|&b| u8::from(b != 0)).collect();
        match Mask::new(width, height, values) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SegsenseMask(m)));
                SegsenseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Creates a mask by thresholding 8-bit intensities: foreground is `> cutoff`.
///
/// # Safety
/// As for `segsense_mask_new`.
#[no_mangle]
pub unsafe extern "C" fn segsense_mask_from_gray(
    width: usize,
    height: usize,
    data: *const u8,
    cutoff: u8,
    out: *mut *mut SegsenseMask,
) -> SegsenseStatus {
    guard(|| {
        non_null!(out);
        let Some(len) = width.checked_mul(height) else {
            return fail(SegsenseStatus::InvalidArgument, "mask size overflows");
        };
        let bytes = match slice(data, len, "data") {
            Ok(b) => b,
            Err(s) => return s,
        };
        let result = mask::GrayImage::new(width, height, bytes.to_vec()).map(|g| mask::to_binary(&g, cutoff));
        match result {
            Ok(m) => {
                *out = Box::into_raw(Box::new(SegsenseMask(m)));
                SegsenseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `mask` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn segsense_mask_free(mask: *mut SegsenseMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// # Safety
/// `mask` must be a live handle and `width`/`height` writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_mask_dims(
    mask: *const SegsenseMask,
    width: *mut usize,
    height: *mut usize,
) -> SegsenseStatus {
    non_null!(mask, width, height);
    *width = (*mask).0.width();
    *height = (*mask).0.height();
    SegsenseStatus::Ok
}

/// # Safety
/// `mask` must be a live handle and `count` writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_mask_foreground_count(
    mask: *const SegsenseMask,
    count: *mut usize,
) -> SegsenseStatus {
    non_null!(mask, count);
    *count = mask::foreground_count(&(*mask).0);
    SegsenseStatus::Ok
}

/// Scores a soft prediction (`width * height` values in [0, 1], row-major)
/// against `gt`. A null `config` uses the defaults.
///
/// # Safety
/// `gt` must be a live handle, `pred` must hold `width * height` doubles of
/// the mask's size, `config` null or readable, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_evaluate(
    gt: *const SegsenseMask,
    pred: *const f64,
    pred_width: usize,
    pred_height: usize,
    config: *const SegsenseMetricConfig,
    out: *mut SegsenseMetrics,
) -> SegsenseStatus {
    guard(|| {
        non_null!(gt, out);
        let Some(len) = pred_width.checked_mul(pred_height) else {
            return fail(SegsenseStatus::InvalidArgument, "prediction size overflows");
        };
        let values = match slice(pred, len, "pred") {
            Ok(v) => v,
            Err(s) => return s,
        };
        let c = if config.is_null() {
            segsense_metric_config_default()
        } else {
            *config
        };
        let cfg = MetricConfig {
            beta: c.beta,
            delta: c.delta,
            bce_clamp: c.bce_clamp,
            spacing: Spacing {
                dy: c.spacing_dy,
                dx: c.spacing_dx,
            },
        };
        let result = cfg
            .validate()
            .and_then(|_| SoftMask::new(pred_width, pred_height, values.to_vec()))
            .and_then(|pr| metrics::evaluate_pair(&(*gt).0, &pr, &cfg, ""));
        match result {
            Ok(r) => {
                *out = SegsenseMetrics {
                    dice: r.dice,
                    f_score: r.f_score,
                    iou: r.iou,
                    rmse: r.rmse,
                    loss_bce: r.loss_bce,
                    loss_dice: r.loss_dice,
                    hausdorff: r.hausdorff.unwrap_or(f64::NAN),
                    hausdorff_defined: u8::from(r.hausdorff.is_some()),
                };
                SegsenseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

fn exp_out(f: &ExpFit) -> SegsenseExpFit {
    SegsenseExpFit {
        a: f.a,
        esr: f.esr,
        c: f.c,
        residual_rms: f.residual_rms,
        iterations: u32::try_from(f.iterations).unwrap_or(u32::MAX),
        degenerate: u8::from(f.degenerate),
    }
}

/// Fits `value = a·exp(−esr·epoch) + c` to `n` points with increasing epochs.
/// On `NotConverged` the best parameters found are still written to `out`.
///
/// # Safety
/// `epochs` and `values` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_fit_exponential(
    epochs: *const f64,
    values: *const f64,
    n: usize,
    out: *mut SegsenseExpFit,
) -> SegsenseStatus {
    guard(|| {
        non_null!(out);
        let (eps, vals) = match (slice(epochs, n, "epochs"), slice(values, n, "values")) {
            (Ok(e), Ok(v)) => (e, v),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let trace = Trace::new(eps.iter().copied().zip(vals.iter().copied()).collect());
        match trace.and_then(|t| fitting::fit_exponential(&t)) {
            Ok(f) => {
                *out = exp_out(&f);
                SegsenseStatus::Ok
            }
            Err(Error::NotConverged { iterations, best }) => {
                *out = exp_out(&best);
                fail(
                    SegsenseStatus::NotConverged,
                    format!("exponential fit did not converge in {iterations} iterations"),
                )
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `fit` must be readable.
#[no_mangle]
pub unsafe extern "C" fn segsense_eval_exponential(fit: *const SegsenseExpFit, epoch: f64) -> f64 {
    if fit.is_null() {
        return f64::NAN;
    }
    let f = &*fit;
    f.a * (-f.esr * epoch).exp() + f.c
}

/// Least-squares plane `p00 + p10·ntrain + p01·ntest` through `n` samples.
///
/// # Safety
/// `ntrain`, `ntest` and `values` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_fit_surface(
    ntrain: *const f64,
    ntest: *const f64,
    values: *const f64,
    n: usize,
    units: SegsenseUnits,
    out: *mut SegsenseSurfaceFit,
) -> SegsenseStatus {
    guard(|| {
        non_null!(out);
        let (x, y, v) = match (
            slice(ntrain, n, "ntrain"),
            slice(ntest, n, "ntest"),
            slice(values, n, "values"),
        ) {
            (Ok(x), Ok(y), Ok(v)) => (x, y, v),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        let samples: Vec<SurfaceSample> = (0..n)
            .map(|i| SurfaceSample {
                ntrain: x[i],
                ntest: y[i],
                value: v[i],
            })
            .collect();
        match fitting::fit_surface(&samples, units.into()) {
            Ok(f) => {
                *out = SegsenseSurfaceFit {
                    p00: f.p00,
                    p10: f.p10,
                    p01: f.p01,
                    residual_rms: f.residual_rms,
                    units: f.units.into(),
                };
                SegsenseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Evaluates a surface at a query point given in `units`.
///
/// # Safety
/// `fit` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_eval_surface(
    fit: *const SegsenseSurfaceFit,
    ntrain: f64,
    ntest: f64,
    units: SegsenseUnits,
    out: *mut f64,
) -> SegsenseStatus {
    guard(|| {
        non_null!(fit, out);
        let f = &*fit;
        let surface = SurfaceFit::new(f.p00, f.p10, f.p01, f.units.into());
        match fitting::eval_surface(&surface, ntrain, ntest, units.into()) {
            Ok(v) => {
                *out = v;
                SegsenseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Five-number summary and sample standard deviation of `n` values.
///
/// # Safety
/// `values` must hold `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn segsense_box_stats(
    values: *const f64,
    n: usize,
    out: *mut SegsenseBoxStats,
) -> SegsenseStatus {
    guard(|| {
        non_null!(out);
        let v = match slice(values, n, "values") {
            Ok(v) => v,
            Err(s) => return s,
        };
        match sweep::reproducibility_stats(v) {
            Ok(b) => {
                *out = SegsenseBoxStats {
                    min: b.min,
                    q1: b.q1,
                    median: b.median,
                    q3: b.q3,
                    max: b.max,
                    stddev: b.stddev,
                    n: b.n,
                };
                SegsenseStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
