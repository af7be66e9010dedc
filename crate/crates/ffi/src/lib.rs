//! C interface to the latentprod estimator.
//!
//! Panels and fits live behind opaque handles that the caller releases
//! with the matching `_free` function. Every fallible call returns an
//! [`LpStatus`] and, on failure, leaves a message for [`lp_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use latentprod::classo::{fit, CLassoConfig, FitResult};
use latentprod::simulate::{draw_panel, SimConfig};
use latentprod::{CsvSchema, Error, MomentSpec, PanelData};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Config = 5,
    Domain = 6,
    Numerical = 7,
    EmptyGroup = 8,
    Panic = 9,
}

/// A validated firm panel.
pub struct LpPanel {
    inner: PanelData,
}

/// A fitted model.
pub struct LpFit {
    inner: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> LpStatus {
    match err {
        Error::Io { .. } => LpStatus::Io,
        Error::Csv(_) | Error::Json(_) | Error::Schema(_) | Error::Parse { .. } => LpStatus::Parse,
        Error::Config(_) | Error::Shape(_) => LpStatus::Config,
        Error::Gap { .. }
        | Error::DuplicatePeriod { .. }
        | Error::TooShort { .. }
        | Error::EmptyPanel
        | Error::Domain(_) => LpStatus::Domain,
        Error::InitialEstimate { .. } | Error::UnderIdentified { .. } | Error::Numerical(_) => {
            LpStatus::Numerical
        }
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (LpStatus, String)>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LpStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LpStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (LpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null_err(what: &str) -> (LpStatus, String) {
    (LpStatus::NullPointer, format!("{what} is null"))
}

/// Error message of the last status-returning call on this thread, or
/// null if that call succeeded. The pointer stays valid until the next
/// call into this library from the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a panel CSV with standard column names (`firm, period, y, k, m`,
/// optional `l` and `s`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_panel_load_csv(path: *const c_char, out: *mut *mut LpPanel) -> LpStatus {
    guard(|| {
        if path.is_null() {
            return Err(null_err("path"));
        }
        if out.is_null() {
            return Err(null_err("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (LpStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
        let schema = CsvSchema::infer_from_csv(path).map_err(lib_err)?;
        let panel = PanelData::load_csv(path, &schema).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(LpPanel { inner: panel }));
        Ok(())
    })
}

/// Draws a panel from the default simulation design. When `groups_out` is
/// not null it receives the 0-based true group of each of the `n` firms.
///
/// # Safety
/// `out` must be valid; `groups_out`, if not null, must hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn lp_panel_simulate(
    n: usize,
    t: usize,
    seed: u64,
    out: *mut *mut LpPanel,
    groups_out: *mut u32,
) -> LpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null_err("out"));
        }
        let cfg = SimConfig {
            n,
            t,
            seed,
            ..SimConfig::default()
        };
        let sim = draw_panel(&cfg).map_err(lib_err)?;
        if !groups_out.is_null() {
            let dst = std::slice::from_raw_parts_mut(groups_out, n);
            for (d, &g) in dst.iter_mut().zip(&sim.groups) {
                *d = g as u32;
            }
        }
        *out = Box::into_raw(Box::new(LpPanel { inner: sim.panel }));
        Ok(())
    })
}

/// # Safety
/// `panel` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_panel_num_firms(panel: *const LpPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.inner.num_firms())
}

/// # Safety
/// `panel` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_panel_num_observations(panel: *const LpPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.inner.num_observations())
}

/// # Safety
/// `panel` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_panel_free(panel: *mut LpPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Fits `groups` groups with the share-equation moment layout (AR(1)
/// productivity with intercept). A non-positive or NaN `lambda` selects
/// the default `T^-0.25`.
///
/// # Safety
/// `panel` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lp_fit(
    panel: *const LpPanel,
    groups: usize,
    lambda: f64,
    out: *mut *mut LpFit,
) -> LpStatus {
    guard(|| {
        let panel = panel.as_ref().ok_or_else(|| null_err("panel"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let config = CLassoConfig {
            groups,
            lambda: (lambda > 0.0).then_some(lambda),
            ..CLassoConfig::default()
        };
        let spec = MomentSpec::gnr(true, panel.inner.has_labor());
        let result = fit(&panel.inner, &config, &spec).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(LpFit { inner: result }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_num_groups(fit: *const LpFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.config.groups)
}

/// # Safety
/// `fit` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_num_params(fit: *const LpFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.spec.num_params())
}

/// # Safety
/// `fit` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_num_firms(fit: *const LpFit) -> usize {
    fit.as_ref().map_or(0, |f| f.inner.classification.num_firms())
}

/// Mean squared composite residual of the group estimates, NaN for null.
///
/// # Safety
/// `fit` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_msr(fit: *const LpFit) -> f64 {
    fit.as_ref().map_or(f64::NAN, |f| f.inner.estimates.msr())
}

/// Writes the 0-based group of every firm, -1 for unclassified firms.
///
/// # Safety
/// `out` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_assignment(fit: *const LpFit, out: *mut i32, len: usize) -> LpStatus {
    guard(|| {
        let fit = fit.as_ref().ok_or_else(|| null_err("fit"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let a = &fit.inner.classification.assignment;
        if len != a.len() {
            return Err((
                LpStatus::InvalidArgument,
                format!("buffer holds {len} entries, {} firms", a.len()),
            ));
        }
        let dst = std::slice::from_raw_parts_mut(out, len);
        for (d, g) in dst.iter_mut().zip(a) {
            *d = g.map_or(-1, |g| g as i32);
        }
        Ok(())
    })
}

unsafe fn group_vector(
    fit: *const LpFit,
    group: usize,
    out: *mut f64,
    len: usize,
    std_errors: bool,
) -> LpStatus {
    guard(|| {
        let fit = fit.as_ref().ok_or_else(|| null_err("fit"))?;
        if out.is_null() {
            return Err(null_err("out"));
        }
        let p = fit.inner.spec.num_params();
        if len != p {
            return Err((
                LpStatus::InvalidArgument,
                format!("buffer holds {len} entries, {p} parameters"),
            ));
        }
        if group >= fit.inner.config.groups {
            return Err((LpStatus::InvalidArgument, format!("no group {group}")));
        }
        let est = fit.inner.estimates.get(group).ok_or_else(|| {
            (
                LpStatus::EmptyGroup,
                format!("group {group} has no estimate"),
            )
        })?;
        let v = if std_errors {
            est.std_errors()
        } else {
            est.theta.clone()
        };
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(v.as_slice());
        Ok(())
    })
}

/// Post-Lasso parameters of a 0-based group.
///
/// # Safety
/// `out` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_group_theta(fit: *const LpFit, group: usize, out: *mut f64, len: usize) -> LpStatus {
    group_vector(fit, group, out, len, false)
}

/// Standard errors matching [`lp_fit_group_theta`].
///
/// # Safety
/// `out` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_group_std_errors(
    fit: *const LpFit,
    group: usize,
    out: *mut f64,
    len: usize,
) -> LpStatus {
    group_vector(fit, group, out, len, true)
}

/// The fit as a JSON document, or null on failure. Release it with
/// [`lp_string_free`].
///
/// # Safety
/// `fit` must be null or a handle from this library.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_to_json(fit: *const LpFit) -> *mut c_char {
    let mut text = None;
    let status = guard(|| {
        let fit = fit.as_ref().ok_or_else(|| null_err("fit"))?;
        let json = serde_json::to_string(&fit.inner).map_err(|e| lib_err(e.into()))?;
        text = Some(CString::new(json).map_err(|e| (LpStatus::Parse, e.to_string()))?);
        Ok(())
    });
    match (status, text) {
        (LpStatus::Ok, Some(s)) => s.into_raw(),
        _ => ptr::null_mut(),
    }
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `fit` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_fit_free(fit: *mut LpFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}
