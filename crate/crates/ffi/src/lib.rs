//! C ABI over `ebtrend`.
//!
//! Every fallible call returns an `EbtrendStatus`. On failure the message is
//! kept per thread and read with `ebtrend_last_error`. Handles are opaque
//! and owned by the caller until passed to the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ebtrend::linmodel::{Contrast, Design, SideSpec};
use ebtrend::multiplicity::bh_adjust;
use ebtrend::nalgebra::DMatrix;
use ebtrend::pipeline::{analyze_matrix, side_orthogonality, AnalysisOptions, MethodResult};
use ebtrend::pvalues::MethodId;
use ebtrend::sim::{monte_carlo, SimConfig, SimMethod};
use ebtrend::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbtrendStatus {
    Ok = 0,
    /// Bad argument, unparsable input or configuration.
    InvalidInput = 2,
    /// Rank-deficient design or failed orthogonality check.
    Design = 3,
    /// Method not applicable to this design or side information.
    NotApplicable = 4,
    Numerical = 5,
    NullPointer = 6,
    /// A Rust panic was caught at the boundary.
    Panic = 7,
}

/// Method codes accepted by `ebtrend_analyze`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbtrendMethod {
    TTest = 0,
    UntrendedInvChisq = 1,
    UntrendedNpmle = 2,
    RegInvChisq = 3,
    RegNpmle = 4,
    JointNpmle = 5,
    DiscreteJoint = 6,
    Map = 7,
    Manorm2 = 8,
}

/// Side-information codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EbtrendSide {
    AverageIntensity = 0,
    /// One caller-supplied value per unit.
    External = 1,
    /// Equal-weight average of the two group means.
    ManormTilde = 2,
}

/// Opaque design matrix.
pub struct EbtrendDesign {
    design: Design,
}

/// Opaque analysis result.
pub struct EbtrendResult {
    n: usize,
    methods: Vec<MethodResult>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EbtrendStatus {
    match e {
        Error::Design(_) => EbtrendStatus::Design,
        Error::NotApplicable { .. } | Error::Binning(_) => EbtrendStatus::NotApplicable,
        Error::Numerical(_) | Error::Quadrature { .. } => EbtrendStatus::Numerical,
        Error::Input(_) | Error::Config(_) | Error::Parse { .. } | Error::Io(_) => EbtrendStatus::InvalidInput,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EbtrendStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EbtrendStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is NULL"));
            EbtrendStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            EbtrendStatus::InvalidInput
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            EbtrendStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be NULL or valid for `len` reads.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn method_from_code(code: i32) -> Option<MethodId> {
    usize::try_from(code).ok().and_then(|i| MethodId::ALL.get(i).copied())
}

fn method_code(m: MethodId) -> i32 {
    MethodId::ALL.iter().position(|&x| x == m).expect("listed") as i32
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ebtrend_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ebtrend_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Static name of a method code, or NULL for an unknown code.
#[no_mangle]
pub extern "C" fn ebtrend_method_name(method: i32) -> *const c_char {
    const NAMES: [&str; 9] = [
        "t_test\0",
        "untrended_inv_chisq\0",
        "untrended_npmle\0",
        "reg_inv_chisq\0",
        "reg_npmle\0",
        "joint_npmle\0",
        "discrete_joint\0",
        "map\0",
        "manorm2\0",
    ];
    usize::try_from(method)
        .ok()
        .and_then(|i| NAMES.get(i))
        .map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Builds a design from the row-major `k` × `p` matrix `x`.
///
/// # Safety
/// `x` must be valid for `k * p` reads and `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_design_new(
    x: *const f64,
    k: usize,
    p: usize,
    out: *mut *mut EbtrendDesign,
) -> EbtrendStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let len = k.checked_mul(p).ok_or_else(|| Failure::Invalid("k * p overflows".into()))?;
        let values = slice(x, len, "x")?;
        let design = Design::new(DMatrix::from_row_slice(k, p, values))?;
        *out = Box::into_raw(Box::new(EbtrendDesign { design }));
        Ok(())
    })
}

/// # Safety
/// `design` must be NULL or a handle from `ebtrend_design_new` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_design_free(design: *mut EbtrendDesign) {
    if !design.is_null() {
        drop(Box::from_raw(design));
    }
}

/// Residual degrees of freedom K − p, or 0 for NULL.
///
/// # Safety
/// `design` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_design_df(design: *const EbtrendDesign) -> usize {
    design.as_ref().map_or(0, |d| d.design.df())
}

fn side_spec(side: i32, values: Option<&[f64]>) -> Result<SideSpec, Failure> {
    match side {
        0 => Ok(SideSpec::AverageIntensity),
        1 => values
            .map(|v| SideSpec::External(v.to_vec()))
            .ok_or(Failure::Null("side_values")),
        2 => Ok(SideSpec::ManormTilde),
        _ => Err(Failure::Invalid(format!("unknown side code {side}"))),
    }
}

/// c_θᵀ(XᵀX)⁻¹c_side for the average-intensity or MAnorm2 side value, and
/// whether it passes along with 𝟏 lying in the column space.
///
/// # Safety
/// `contrast` must be valid for p reads; `out_value` and `out_ok` for one
/// write each.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_check_orthogonality(
    design: *const EbtrendDesign,
    contrast: *const f64,
    side: i32,
    out_value: *mut f64,
    out_ok: *mut bool,
) -> EbtrendStatus {
    guard(|| {
        let design = &design.as_ref().ok_or(Failure::Null("design"))?.design;
        if out_value.is_null() || out_ok.is_null() {
            return Err(Failure::Null("output pointer"));
        }
        let c = slice(contrast, design.p(), "contrast")?;
        let theta = Contrast::new(c.to_vec(), design)?;
        let spec = match side {
            0 => SideSpec::AverageIntensity,
            2 => SideSpec::ManormTilde,
            _ => return Err(Failure::Invalid("only the intensity and MAnorm2 sides can be checked".into())),
        };
        let report = side_orthogonality(design, &theta, &spec)?.expect("linear side");
        *out_value = report.value;
        *out_ok = report.ok && report.ones_in_colspace;
        Ok(())
    })
}

/// Fits each row of the row-major `n` × `k` matrix `y` and computes p- and
/// q-values for `methods` (codes from `EbtrendMethod`). `side_values` is
/// read only for the external side and then needs `n` entries. Results are
/// stored in canonical method order with duplicates removed.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `contrast` holds one
/// weight per design column; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_analyze(
    y: *const f64,
    n: usize,
    k: usize,
    design: *const EbtrendDesign,
    contrast: *const f64,
    side: i32,
    side_values: *const f64,
    methods: *const i32,
    n_methods: usize,
    allow_nonorthogonal: bool,
    out: *mut *mut EbtrendResult,
) -> EbtrendStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let design = &design.as_ref().ok_or(Failure::Null("design"))?.design;
        if k != design.k() {
            return Err(Failure::Invalid(format!("k = {k} but the design has {} samples", design.k())));
        }
        let len = n.checked_mul(k).ok_or_else(|| Failure::Invalid("n * k overflows".into()))?;
        let y = slice(y, len, "y")?;
        let theta = Contrast::new(slice(contrast, design.p(), "contrast")?.to_vec(), design)?;
        let values = if side == 1 { Some(slice(side_values, n, "side_values")?) } else { None };
        let spec = side_spec(side, values)?;
        let codes = slice(methods, n_methods, "methods")?;
        let ids = codes
            .iter()
            .map(|&c| method_from_code(c).ok_or_else(|| Failure::Invalid(format!("unknown method code {c}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let results = analyze_matrix(y, design, &theta, &spec, &ids, &AnalysisOptions::default(), allow_nonorthogonal)?;
        *out = Box::into_raw(Box::new(EbtrendResult { n, methods: results }));
        Ok(())
    })
}

/// # Safety
/// `result` must be NULL or a live handle from `ebtrend_analyze`.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_result_free(result: *mut EbtrendResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_result_n_units(result: *const EbtrendResult) -> usize {
    result.as_ref().map_or(0, |r| r.n)
}

/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_result_n_methods(result: *const EbtrendResult) -> usize {
    result.as_ref().map_or(0, |r| r.methods.len())
}

/// Method code of column `i`, or −1 when out of range.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_result_method(result: *const EbtrendResult, i: usize) -> i32 {
    result
        .as_ref()
        .and_then(|r| r.methods.get(i))
        .map_or(-1, |m| method_code(m.method))
}

/// P-values of column `i` (n entries, owned by `result`), or NULL.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_result_p(result: *const EbtrendResult, i: usize) -> *const f64 {
    result
        .as_ref()
        .and_then(|r| r.methods.get(i))
        .map_or(ptr::null(), |m| m.p.as_ptr())
}

/// BH-adjusted q-values of column `i` (n entries, owned by `result`), or
/// NULL.
///
/// # Safety
/// `result` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_result_q(result: *const EbtrendResult, i: usize) -> *const f64 {
    result
        .as_ref()
        .and_then(|r| r.methods.get(i))
        .map_or(ptr::null(), |m| m.q.as_ptr())
}

/// Benjamini–Hochberg adjusted p-values of `p` into `out`.
///
/// # Safety
/// `p` and `out` must be valid for `n` reads and writes respectively.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_bh_adjust(p: *const f64, n: usize, out: *mut f64) -> EbtrendStatus {
    guard(|| {
        let p = slice(p, n, "p")?;
        let q = bh_adjust(p)?;
        if n > 0 {
            if out.is_null() {
                return Err(Failure::Null("out"));
            }
            std::slice::from_raw_parts_mut(out, n).copy_from_slice(&q);
        }
        Ok(())
    })
}

/// Runs a named simulation preset and returns the summary table as a
/// NUL-terminated TSV string, to be released with `ebtrend_string_free`.
/// Zero `n` or `reps` keeps the preset's value; `n` scales the null count.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out_tsv` valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_simulate(
    preset: *const c_char,
    n: usize,
    reps: usize,
    seed: u64,
    out_tsv: *mut *mut c_char,
) -> EbtrendStatus {
    guard(|| {
        if preset.is_null() {
            return Err(Failure::Null("preset"));
        }
        if out_tsv.is_null() {
            return Err(Failure::Null("out_tsv"));
        }
        let name = CStr::from_ptr(preset)
            .to_str()
            .map_err(|_| Failure::Invalid("preset name is not UTF-8".into()))?;
        let mut cfg = SimConfig::preset(name)?;
        if n > 0 {
            cfg.n0 = ((cfg.n0 as f64) * n as f64 / cfg.n as f64).round() as usize;
            cfg.n = n;
        }
        if reps > 0 {
            cfg.reps = reps;
        }
        cfg.seed = seed;
        let summary = monte_carlo(&cfg, &SimMethod::table_default(), &AnalysisOptions::default())?;
        let tsv = CString::new(summary.to_tsv()).expect("table has no NULs");
        *out_tsv = tsv.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ebtrend_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
