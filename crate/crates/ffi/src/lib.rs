//! C ABI over the nbgam engine.
//!
//! Objects are opaque handles created by `nbgam_*` constructors and released
//! with the matching `_free` function. Every function returns an
//! [`NbgamStatus`]; on failure [`nbgam_last_error_message`] describes the
//! error on the calling thread. Strings returned through out-parameters are
//! owned by the caller and must be released with [`nbgam_string_free`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use nbgam::data::{load_panel, load_panel_from_reader, LoadOptions, Panel};
use nbgam::family::nb_logpmf;
use nbgam::fitter::{predict, select_smoothing, FitError, FitOptions, FitResult};
use nbgam::model_dsl::{format_spec, parse_formula, Family, OffsetRule};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbgamStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    FormulaError = 3,
    DataError = 4,
    FitError = 5,
    NotConverged = 6,
    OutOfDomain = 7,
    InvalidArgument = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Count family selector for [`nbgam_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NbgamFamily {
    NegativeBinomial = 0,
    Poisson = 1,
}

/// Loaded unit-by-month panel.
pub struct NbgamPanel {
    panel: Panel,
}

/// Fitted model.
pub struct NbgamFit {
    fit: FitResult,
}

/// Scalar summary of a fit. `phi` is NaN for the Poisson family.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NbgamFitSummary {
    pub edf_total: f64,
    pub deviance: f64,
    pub loglik: f64,
    pub aic: f64,
    pub gcv: f64,
    pub phi: f64,
    pub n_obs: usize,
    pub num_coefficients: usize,
    pub num_smoothing_params: usize,
    pub converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type Failure = (NbgamStatus, String);

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

/// Run `body`, converting errors and panics into a status and a stored message.
fn guard<F: FnOnce() -> Result<(), Failure>>(body: F) -> NbgamStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_last_error("");
            NbgamStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            NbgamStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (NbgamStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (NbgamStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn fit_failure(e: FitError) -> Failure {
    let status = match e {
        FitError::OutOfDomain(_) | FitError::MissingCovariate { .. } => NbgamStatus::OutOfDomain,
        FitError::Schema(_) => NbgamStatus::InvalidArgument,
        _ => NbgamStatus::FitError,
    };
    (status, e.to_string())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| (NbgamStatus::InvalidArgument, "string contains NUL".to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message describing the last failure on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn nbgam_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nbgam_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nbgam_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Load a panel CSV from `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_panel_load(path: *const c_char, out: *mut *mut NbgamPanel) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let (panel, _) = load_panel(Path::new(path), &LoadOptions::default())
            .map_err(|e| (NbgamStatus::DataError, format!("{path}: {e}")))?;
        *out = Box::into_raw(Box::new(NbgamPanel { panel }));
        Ok(())
    })
}

/// Parse a panel from CSV text held in memory.
///
/// # Safety
/// `csv_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_panel_from_csv(csv_text: *const c_char, out: *mut *mut NbgamPanel) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let text = str_arg(csv_text, "csv_text")?;
        let (panel, _) = load_panel_from_reader(text.as_bytes(), &LoadOptions::default())
            .map_err(|e| (NbgamStatus::DataError, e.to_string()))?;
        *out = Box::into_raw(Box::new(NbgamPanel { panel }));
        Ok(())
    })
}

/// # Safety
/// `panel` must come from a panel constructor and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nbgam_panel_free(panel: *mut NbgamPanel) {
    if !panel.is_null() {
        drop(Box::from_raw(panel));
    }
}

/// Number of unit-month rows, or 0 for a null handle.
///
/// # Safety
/// `panel` must be null or a live panel handle.
#[no_mangle]
pub unsafe extern "C" fn nbgam_panel_num_rows(panel: *const NbgamPanel) -> usize {
    panel.as_ref().map_or(0, |p| p.panel.len())
}

/// Fit `formula` to `panel` with GCV smoothing selection. `offset` is
/// `person-years`, `none` or `column:NAME`; null selects `person-years`.
/// An unconverged fit is still returned through `out`, with status
/// `NotConverged`.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nbgam_fit(
    panel: *const NbgamPanel,
    formula: *const c_char,
    family: NbgamFamily,
    offset: *const c_char,
    out: *mut *mut NbgamFit,
) -> NbgamStatus {
    let mut unconverged = false;
    let status = guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let panel = panel.as_ref().ok_or_else(|| null("panel"))?;
        let formula = str_arg(formula, "formula")?;
        let mut spec = parse_formula(formula).map_err(|e| (NbgamStatus::FormulaError, e.to_string()))?;
        spec.family = match family {
            NbgamFamily::NegativeBinomial => Family::NegBin,
            NbgamFamily::Poisson => Family::Poisson,
        };
        if !offset.is_null() {
            spec.offset_rule = str_arg(offset, "offset")?
                .parse::<OffsetRule>()
                .map_err(|e| (NbgamStatus::InvalidArgument, e))?;
        }
        let fit = select_smoothing(&spec, &panel.panel, &FitOptions::default()).map_err(fit_failure)?;
        unconverged = !fit.converged;
        *out = Box::into_raw(Box::new(NbgamFit { fit }));
        Ok(())
    });
    if status == NbgamStatus::Ok && unconverged {
        set_last_error("smoothing selection did not converge within its evaluation budget");
        return NbgamStatus::NotConverged;
    }
    status
}

/// # Safety
/// `fit` must come from [`nbgam_fit`] or [`nbgam_fit_from_json`] and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nbgam_fit_free(fit: *mut NbgamFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Serialize a fit to JSON; release the string with [`nbgam_string_free`].
///
/// # Safety
/// `fit` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_fit_to_json(fit: *const NbgamFit, out: *mut *mut c_char) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let fit = fit.as_ref().ok_or_else(|| null("fit"))?;
        write_string(out, fit.fit.to_json())
    })
}

/// Restore a fit from its JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_fit_from_json(json: *const c_char, out: *mut *mut NbgamFit) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let fit = FitResult::from_json(str_arg(json, "json")?).map_err(fit_failure)?;
        *out = Box::into_raw(Box::new(NbgamFit { fit }));
        Ok(())
    })
}

/// # Safety
/// `fit` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_fit_summary(fit: *const NbgamFit, out: *mut NbgamFitSummary) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.fit;
        *out = NbgamFitSummary {
            edf_total: f.edf_total,
            deviance: f.deviance,
            loglik: f.loglik,
            aic: f.aic,
            gcv: f.gcv,
            phi: f.phi.unwrap_or(f64::NAN),
            n_obs: f.n_obs,
            num_coefficients: f.coefficients.len(),
            num_smoothing_params: f.log_lambdas.len(),
            converged: f.converged,
        };
        Ok(())
    })
}

/// Copy the coefficients into `buf`. `needed` always receives the count; when
/// `capacity` is smaller the status is `BufferTooSmall` and nothing is copied.
///
/// # Safety
/// `buf` must hold `capacity` doubles (it may be null when `capacity` is 0).
#[no_mangle]
pub unsafe extern "C" fn nbgam_fit_coefficients(
    fit: *const NbgamFit,
    buf: *mut f64,
    capacity: usize,
    needed: *mut usize,
) -> NbgamStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.fit;
        let n = f.coefficients.len();
        if !needed.is_null() {
            *needed = n;
        }
        if capacity < n {
            return Err((NbgamStatus::BufferTooSmall, format!("{n} coefficients, buffer holds {capacity}")));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(f.coefficients.as_ptr(), buf, n);
        Ok(())
    })
}

/// Predict rates at `num_rows` points. `values` is row-major with one column
/// per entry of `names`; `rates` receives one value per row (per 100,000
/// person-years under the default offset).
///
/// # Safety
/// `names` must hold `num_vars` strings, `values` `num_rows * num_vars`
/// doubles and `rates` `num_rows` doubles.
#[no_mangle]
pub unsafe extern "C" fn nbgam_predict(
    fit: *const NbgamFit,
    names: *const *const c_char,
    num_vars: usize,
    values: *const f64,
    num_rows: usize,
    rates: *mut f64,
) -> NbgamStatus {
    guard(|| {
        let f = &fit.as_ref().ok_or_else(|| null("fit"))?.fit;
        if num_rows == 0 {
            return Ok(());
        }
        if rates.is_null() {
            return Err(null("rates"));
        }
        if num_vars > 0 && (names.is_null() || values.is_null()) {
            return Err(null("names or values"));
        }
        let names: Vec<&str> = (0..num_vars)
            .map(|j| str_arg(*names.add(j), "variable name"))
            .collect::<Result<_, _>>()?;
        let values = if num_vars > 0 { std::slice::from_raw_parts(values, num_rows * num_vars) } else { &[] };
        let rows: Vec<BTreeMap<String, f64>> = (0..num_rows)
            .map(|i| names.iter().enumerate().map(|(j, n)| (n.to_string(), values[i * num_vars + j])).collect())
            .collect();
        let pred = predict(f, &rows, &BTreeMap::new()).map_err(fit_failure)?;
        let out = std::slice::from_raw_parts_mut(rates, num_rows);
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p.rate;
        }
        Ok(())
    })
}

/// Negative binomial log-pmf with mean `mu` and dispersion `phi`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_nb_logpmf(y: u64, mu: f64, phi: f64, out: *mut f64) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = nb_logpmf(y, mu, phi).map_err(|e| (NbgamStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Parse a formula and return its canonical text.
///
/// # Safety
/// `formula` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nbgam_parse_formula(formula: *const c_char, out: *mut *mut c_char) -> NbgamStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = parse_formula(str_arg(formula, "formula")?).map_err(|e| (NbgamStatus::FormulaError, e.to_string()))?;
        write_string(out, format_spec(&spec))
    })
}
