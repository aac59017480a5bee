//! C ABI over the numeric kernels: variational mode decomposition, the
//! normalised mutual-information coefficient, fuzzy entropy, the adaptive
//! robust loss, gradient centralization and forecast metrics.
//!
//! Conventions:
//!
//! * every fallible function returns an [`McStatus`]; `Ok` is zero
//! * on failure a thread-local message is recorded and stays readable via
//!   [`mc_last_error`] until the next call from the same thread
//! * output buffers are caller-allocated; sizes can be queried first
//! * [`McVmd`] is an opaque handle that must be released with
//!   [`mc_vmd_free`]
//!
//! All entry points catch panics at the boundary and report them as
//! [`McStatus::Panic`] instead of unwinding into C.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use modecast::error::Error;
use modecast::micfe::{fuzzy_entropy, FeParams, MicEstimator, Tolerance};
use modecast::train::{centralize_gradient, metrics, robust_loss_scalar};
use modecast::vmd::{vmd_decompose, ImfSet, VmdParams};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    /// Success.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArg = 1,
    /// An argument violated a documented precondition.
    InvalidArg = 2,
    /// The computation failed on a numerical domain problem.
    Numeric = 3,
    /// An internal invariant failed; treat the library state as poisoned.
    Panic = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().filter(|&ch| ch != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).expect("NUL-free by construction");
    });
}

fn fail(status: McStatus, msg: &str) -> McStatus {
    set_error(msg);
    status
}

fn fail_from(err: Error) -> McStatus {
    let status = match err {
        Error::Config(_) | Error::Sizing(_) => McStatus::InvalidArg,
        _ => McStatus::Numeric,
    };
    fail(status, &err.to_string())
}

/// Message describing the most recent failure on this thread, empty when
/// the last call succeeded. The pointer stays valid until the next ABI
/// call from the same thread; copy the string if it must outlive that.
#[no_mangle]
pub extern "C" fn mc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Runs `f` with panics converted to `McStatus::Panic`, clearing the
/// error slot first so `mc_last_error` always describes the latest call.
fn guarded(f: impl FnOnce() -> McStatus) -> McStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic with non-string payload".into());
            fail(McStatus::Panic, &msg)
        }
    }
}

/// # Safety contract helpers
///
/// The wrappers below uphold the usual C rules: input pointers must
/// reference `len` readable elements, output pointers `len` writable
/// ones, and nothing may alias a buffer that is written to.
unsafe fn in_slice<'a>(ptr: *const f64, len: usize, name: &str) -> Result<&'a [f64], McStatus> {
    if ptr.is_null() {
        return Err(fail(McStatus::NullArg, &format!("{name} is NULL")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out_slice<'a>(ptr: *mut f64, len: usize, name: &str) -> Result<&'a mut [f64], McStatus> {
    if ptr.is_null() {
        return Err(fail(McStatus::NullArg, &format!("{name} is NULL")));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

// ---------------------------------------------------------------------------
// mode decomposition
// ---------------------------------------------------------------------------

/// Decomposition settings; obtain defaults from [`mc_vmd_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct McVmdParams {
    /// Number of modes to extract; must be >= 1.
    pub k: usize,
    /// Bandwidth penalty; larger values give narrower modes.
    pub alpha: f64,
    /// Dual-ascent step; 0 disables the Lagrangian multiplier.
    pub tau: f64,
    /// Convergence threshold on the summed relative spectral change.
    pub tol: f64,
    pub max_iter: usize,
    /// Lock the first mode's centre frequency to 0 (trend capture).
    pub dc_mode: bool,
}

impl From<McVmdParams> for VmdParams {
    fn from(p: McVmdParams) -> Self {
        VmdParams {
            k: p.k,
            alpha: p.alpha,
            tau: p.tau,
            tol: p.tol,
            max_iter: p.max_iter,
            dc_mode: p.dc_mode,
        }
    }
}

/// Library default decomposition settings (k=4, alpha=2000, tau=0,
/// tol=1e-7, max_iter=500, dc_mode off).
#[no_mangle]
pub extern "C" fn mc_vmd_params_default() -> McVmdParams {
    let d = VmdParams::default();
    McVmdParams {
        k: d.k,
        alpha: d.alpha,
        tau: d.tau,
        tol: d.tol,
        max_iter: d.max_iter,
        dc_mode: d.dc_mode,
    }
}

/// Opaque decomposition result; release with [`mc_vmd_free`].
pub struct McVmd {
    set: ImfSet,
    n: usize,
}

/// Decomposes `signal[0..n]` into `params.k` band-limited modes.
///
/// On success `*out` owns a new handle. `n` must be at least `2 * k` and
/// the signal finite.
///
/// # Safety
/// `signal` must point to `n` readable doubles and `out` to a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_decompose(
    signal: *const f64,
    n: usize,
    params: McVmdParams,
    out: *mut *mut McVmd,
) -> McStatus {
    guarded(|| {
        if out.is_null() {
            return fail(McStatus::NullArg, "out is NULL");
        }
        let signal = match in_slice(signal, n, "signal") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match vmd_decompose(signal, &params.into()) {
            Ok(set) => {
                *out = Box::into_raw(Box::new(McVmd { set, n }));
                McStatus::Ok
            }
            Err(err) => fail_from(err),
        }
    })
}

/// Number of modes in the handle; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_mode_count(handle: *const McVmd) -> usize {
    handle.as_ref().map_or(0, |h| h.set.modes.len())
}

/// Length of every mode (= input length); 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_len(handle: *const McVmd) -> usize {
    handle.as_ref().map_or(0, |h| h.n)
}

/// ADMM iterations performed; 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_iterations(handle: *const McVmd) -> usize {
    handle.as_ref().map_or(0, |h| h.set.iterations)
}

/// Whether the tolerance was reached before `max_iter`; false for NULL.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_converged(handle: *const McVmd) -> bool {
    handle.as_ref().is_some_and(|h| h.set.converged)
}

unsafe fn copy_series(src: &[f64], out: *mut f64, capacity: usize, what: &str) -> McStatus {
    if capacity < src.len() {
        return fail(
            McStatus::InvalidArg,
            &format!("{what}: capacity {capacity} < required {}", src.len()),
        );
    }
    match out_slice(out, src.len(), "out") {
        Ok(dst) => {
            dst.copy_from_slice(src);
            McStatus::Ok
        }
        Err(status) => status,
    }
}

/// Copies mode `index` (0-based, ascending centre frequency) into `out`.
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_copy_mode(
    handle: *const McVmd,
    index: usize,
    out: *mut f64,
    capacity: usize,
) -> McStatus {
    guarded(|| {
        let Some(h) = handle.as_ref() else {
            return fail(McStatus::NullArg, "handle is NULL");
        };
        let Some(mode) = h.set.modes.get(index) else {
            return fail(
                McStatus::InvalidArg,
                &format!("mode index {index} out of range 0..{}", h.set.modes.len()),
            );
        };
        copy_series(mode, out, capacity, "mode")
    })
}

/// Copies `signal - sum(modes)` into `out`.
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_copy_residual(
    handle: *const McVmd,
    out: *mut f64,
    capacity: usize,
) -> McStatus {
    guarded(|| {
        let Some(h) = handle.as_ref() else {
            return fail(McStatus::NullArg, "handle is NULL");
        };
        copy_series(&h.set.residual, out, capacity, "residual")
    })
}

/// Copies the normalised centre frequencies (ascending, in [0, 0.5],
/// cycles per sample) into `out`.
///
/// # Safety
/// `out` must point to `capacity` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_copy_center_freqs(
    handle: *const McVmd,
    out: *mut f64,
    capacity: usize,
) -> McStatus {
    guarded(|| {
        let Some(h) = handle.as_ref() else {
            return fail(McStatus::NullArg, "handle is NULL");
        };
        copy_series(&h.set.center_freqs, out, capacity, "center_freqs")
    })
}

/// Releases a handle. NULL is a no-op; freeing twice is undefined.
#[no_mangle]
pub unsafe extern "C" fn mc_vmd_free(handle: *mut McVmd) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

// ---------------------------------------------------------------------------
// correlation and complexity
// ---------------------------------------------------------------------------

/// Normalised mutual information of two equal-length series, in [0, 1].
/// Histograms use equal-frequency bins, `floor(n^0.4)` clamped to [4, 32].
///
/// # Safety
/// `x` and `y` must point to `n` readable doubles, `out` to one writable.
#[no_mangle]
pub unsafe extern "C" fn mc_mic(
    x: *const f64,
    y: *const f64,
    n: usize,
    out: *mut f64,
) -> McStatus {
    guarded(|| {
        let (x, y) = match (in_slice(x, n, "x"), in_slice(y, n, "y")) {
            (Ok(x), Ok(y)) => (x, y),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        if out.is_null() {
            return fail(McStatus::NullArg, "out is NULL");
        }
        match MicEstimator::default().mic(x, y) {
            Ok(v) => {
                *out = v;
                McStatus::Ok
            }
            Err(err) => fail_from(err),
        }
    })
}

/// Fuzzy entropy of `x[0..n]` with embedding dimension `m` and tolerance
/// `r_std_fraction * std(x)`. A constant sequence scores exactly 0.
///
/// # Safety
/// `x` must point to `n` readable doubles, `out` to one writable.
#[no_mangle]
pub unsafe extern "C" fn mc_fuzzy_entropy(
    x: *const f64,
    n: usize,
    m: usize,
    r_std_fraction: f64,
    out: *mut f64,
) -> McStatus {
    guarded(|| {
        let x = match in_slice(x, n, "x") {
            Ok(x) => x,
            Err(status) => return status,
        };
        if out.is_null() {
            return fail(McStatus::NullArg, "out is NULL");
        }
        let p = FeParams { m, r: Tolerance::StdFraction(r_std_fraction) };
        match fuzzy_entropy(x, &p) {
            Ok(v) => {
                *out = v;
                McStatus::Ok
            }
            Err(err) => fail_from(err),
        }
    })
}

// ---------------------------------------------------------------------------
// loss, gradient treatment, metrics
// ---------------------------------------------------------------------------

/// Robust loss of residual `z` with shape `beta` and scale `c > 0`.
/// `beta = 2` is squared error / 2, `beta = 0` the log form, large
/// negative `beta` approaches a bounded saturating loss.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn mc_robust_loss(z: f64, beta: f64, c: f64, out: *mut f64) -> McStatus {
    guarded(|| {
        if out.is_null() {
            return fail(McStatus::NullArg, "out is NULL");
        }
        if !(c > 0.0) || !c.is_finite() {
            return fail(McStatus::InvalidArg, &format!("scale c must be finite and > 0, got {c}"));
        }
        if !z.is_finite() || !beta.is_finite() {
            return fail(McStatus::InvalidArg, "z and beta must be finite");
        }
        *out = robust_loss_scalar(z, beta, c);
        McStatus::Ok
    })
}

/// Centralizes a row-major `rows x cols` gradient in place: subtracts
/// from every column its mean, so each column of the result sums to zero.
/// Apply to weight matrices only; bias vectors are conventionally left
/// alone (`rows = 1` would zero them entirely).
///
/// # Safety
/// `grad` must point to `rows * cols` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mc_centralize_gradient(
    grad: *mut f64,
    rows: usize,
    cols: usize,
) -> McStatus {
    guarded(|| {
        if rows == 0 || cols == 0 {
            return fail(McStatus::InvalidArg, "rows and cols must be >= 1");
        }
        let n = match rows.checked_mul(cols) {
            Some(n) => n,
            None => return fail(McStatus::InvalidArg, "rows * cols overflows"),
        };
        let grad = match out_slice(grad, n, "grad") {
            Ok(g) => g,
            Err(status) => return status,
        };
        centralize_gradient(&[rows, cols], grad);
        McStatus::Ok
    })
}

/// Forecast accuracy summary. `r2` is meaningful only when `has_r2` is
/// true; it is undefined for a constant truth series.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct McMetrics {
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
    pub r2: f64,
    pub has_r2: bool,
    pub n: usize,
}

/// Computes MAE, MSE, RMSE and R^2 of `pred` against `truth`.
///
/// # Safety
/// `pred` and `truth` must point to `n` readable doubles, `out` to one
/// writable [`McMetrics`].
#[no_mangle]
pub unsafe extern "C" fn mc_forecast_metrics(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    out: *mut McMetrics,
) -> McStatus {
    guarded(|| {
        if n == 0 {
            return fail(McStatus::InvalidArg, "n must be >= 1");
        }
        let (pred, truth) = match (in_slice(pred, n, "pred"), in_slice(truth, n, "truth")) {
            (Ok(p), Ok(t)) => (p, t),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        if out.is_null() {
            return fail(McStatus::NullArg, "out is NULL");
        }
        let m = metrics(pred, truth);
        *out = McMetrics {
            mae: m.mae,
            mse: m.mse,
            rmse: m.rmse,
            r2: m.r2.unwrap_or(f64::NAN),
            has_r2: m.r2.is_some(),
            n: m.n,
        };
        McStatus::Ok
    })
}
