//! C interface. Objects cross the boundary as opaque handles owned by the
//! caller and released with the matching `*_free`; every call returns an
//! [`SbtStatus`] and leaves a message for [`sbt_last_error_message`].
//!
//! Pointer contract for every function: handles are live values returned by
//! this library, arrays hold at least the stated number of elements, strings
//! are NUL-terminated UTF-8, and output slots are writable. Null pointers are
//! detected and reported as `NullPointer`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sobotrim::grid::{energy, Grid, GridMap, Region};
use sobotrim::manifolds::TargetManifold;
use sobotrim::maps::{mollify_project, MapSpec};
use sobotrim::pipeline::{converge, ClaimConstants, ScheduleLaw, StageSchedule};
use sobotrim::trimming::{brouwer_degree, DegreeMethod};
use sobotrim::Error;

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SbtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    NumericalFailure = 3,
    TrimmingFailed = 4,
    NotConverged = 5,
    Panic = 6,
}

/// Opaque sampled map on a cube grid.
pub struct SbtGridMap(GridMap);

/// Opaque target manifold.
pub struct SbtManifold(TargetManifold);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

/// Failure inside an entry point.
enum Fail {
    Null,
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Fail {
        Fail::Core(e)
    }
}

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Fail {
        Fail::Core(Error::Json(e))
    }
}

fn status_of(e: &Error) -> SbtStatus {
    match e.exit_code() {
        2 => SbtStatus::InvalidInput,
        4 => SbtStatus::TrimmingFailed,
        _ => SbtStatus::NumericalFailure,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<SbtStatus, Fail>) -> SbtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => {
            if s == SbtStatus::Ok {
                set_error("");
            }
            s
        }
        Ok(Err(Fail::Null)) => {
            set_error("null pointer argument");
            SbtStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            SbtStatus::Panic
        }
    }
}

fn null() -> Fail {
    Fail::Null
}

unsafe fn cstr<'a>(s: *const c_char) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s).to_str().map_err(|_| Fail::Core(Error::InvalidInput("string is not UTF-8".into())))
}

unsafe fn slice<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Copy the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
#[no_mangle]
pub unsafe extern "C" fn sbt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

fn put_manifold(out: *mut *mut SbtManifold, m: Result<TargetManifold, Error>) -> Result<SbtStatus, Fail> {
    if out.is_null() {
        return Err(null());
    }
    let m = m?;
    unsafe { *out = Box::into_raw(Box::new(SbtManifold(m))) };
    Ok(SbtStatus::Ok)
}

fn put_map(out: *mut *mut SbtGridMap, u: Result<GridMap, Error>) -> Result<SbtStatus, Fail> {
    if out.is_null() {
        return Err(null());
    }
    let u = u?;
    unsafe { *out = Box::into_raw(Box::new(SbtGridMap(u))) };
    Ok(SbtStatus::Ok)
}

/// Round sphere S^n ⊂ R^{n+1}.
#[no_mangle]
pub unsafe extern "C" fn sbt_manifold_sphere(n: usize, out: *mut *mut SbtManifold) -> SbtStatus {
    guard(|| put_manifold(out, TargetManifold::sphere(n)))
}

/// R^n with the identity projection.
#[no_mangle]
pub unsafe extern "C" fn sbt_manifold_euclidean(n: usize, out: *mut *mut SbtManifold) -> SbtStatus {
    guard(|| put_manifold(out, TargetManifold::euclidean(n)))
}

/// Funnel sphere with growth exponent α ∈ [0, (n−1)/n).
#[no_mangle]
pub unsafe extern "C" fn sbt_manifold_funnel_sphere(n: usize, alpha: f64, out: *mut *mut SbtManifold) -> SbtStatus {
    guard(|| put_manifold(out, TargetManifold::funnel_sphere(n, alpha)))
}

#[no_mangle]
pub unsafe extern "C" fn sbt_manifold_free(m: *mut SbtManifold) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Ambient dimension ν of the embedding.
#[no_mangle]
pub unsafe extern "C" fn sbt_manifold_ambient_dim(m: *const SbtManifold, nu: *mut usize) -> SbtStatus {
    guard(|| {
        if m.is_null() || nu.is_null() {
            return Err(null());
        }
        *nu = (*m).0.nu;
        Ok(SbtStatus::Ok)
    })
}

/// Nearest-point projection of `y` (length ν) into `out` (length ν).
#[no_mangle]
pub unsafe extern "C" fn sbt_manifold_project(m: *const SbtManifold, y: *const f64, out: *mut f64, nu: usize) -> SbtStatus {
    guard(|| {
        if m.is_null() {
            return Err(null());
        }
        let m = &(*m).0;
        if nu != m.nu {
            return Err(Fail::Core(Error::InvalidInput(format!("expected {} coordinates, got {nu}", m.nu))));
        }
        let p = m.project(slice(y, nu)?)?;
        slice_mut(out, nu)?.copy_from_slice(&p);
        Ok(SbtStatus::Ok)
    })
}

/// Map on the grid of `res`^m nodes covering the cube of the given inradius
/// around 0, from `len = res^m·nu` row-major values (last axis fastest).
#[no_mangle]
pub unsafe extern "C" fn sbt_gridmap_new(
    m: usize,
    res: usize,
    inradius: f64,
    nu: usize,
    values: *const f64,
    len: usize,
    out: *mut *mut SbtGridMap,
) -> SbtStatus {
    guard(|| {
        let g = Grid::new(m, res, inradius)?;
        let v = slice(values, len)?.to_vec();
        put_map(out, GridMap::new(g, nu, v))
    })
}

/// Sample a named map given as JSON, e.g. `{"kind":"angular"}`.
#[no_mangle]
pub unsafe extern "C" fn sbt_gridmap_builtin(
    spec_json: *const c_char,
    m: usize,
    res: usize,
    inradius: f64,
    out: *mut *mut SbtGridMap,
) -> SbtStatus {
    guard(|| {
        let spec: MapSpec = serde_json::from_str(cstr(spec_json)?)?;
        let g = Grid::new(m, res, inradius)?;
        put_map(out, spec.build(&g))
    })
}

#[no_mangle]
pub unsafe extern "C" fn sbt_gridmap_free(u: *mut SbtGridMap) {
    if !u.is_null() {
        drop(Box::from_raw(u));
    }
}

/// Node count and value dimension.
#[no_mangle]
pub unsafe extern "C" fn sbt_gridmap_shape(u: *const SbtGridMap, n_nodes: *mut usize, nu: *mut usize) -> SbtStatus {
    guard(|| {
        if u.is_null() || n_nodes.is_null() || nu.is_null() {
            return Err(null());
        }
        *n_nodes = (*u).0.n_nodes();
        *nu = (*u).0.nu;
        Ok(SbtStatus::Ok)
    })
}

/// Copy all values (n_nodes·nu doubles) into `out`.
#[no_mangle]
pub unsafe extern "C" fn sbt_gridmap_values(u: *const SbtGridMap, out: *mut f64, len: usize) -> SbtStatus {
    guard(|| {
        if u.is_null() {
            return Err(null());
        }
        let v = &(*u).0.values;
        if len != v.len() {
            return Err(Fail::Core(Error::InvalidInput(format!("buffer holds {len} values, map has {}", v.len()))));
        }
        slice_mut(out, len)?.copy_from_slice(v);
        Ok(SbtStatus::Ok)
    })
}

/// ∫|Du|^p over the whole grid.
#[no_mangle]
pub unsafe extern "C" fn sbt_energy(u: *const SbtGridMap, p: f64, out: *mut f64) -> SbtStatus {
    guard(|| {
        if u.is_null() || out.is_null() {
            return Err(null());
        }
        let u = &(*u).0;
        *out = energy(u, p, &Region::full(&u.grid))?;
        Ok(SbtStatus::Ok)
    })
}

/// Brouwer degree of an R^m-valued map on the centred cube of radius `r`
/// about the probe `y` (length m). `method` 0 is the winding number (m = 2),
/// 1 signed simplex counting.
#[no_mangle]
pub unsafe extern "C" fn sbt_brouwer_degree(u: *const SbtGridMap, r: f64, y: *const f64, method: i32, out: *mut i64) -> SbtStatus {
    guard(|| {
        if u.is_null() || out.is_null() {
            return Err(null());
        }
        let u = &(*u).0;
        let method = match method {
            0 => DegreeMethod::Winding,
            1 => DegreeMethod::Simplex,
            _ => return Err(Fail::Core(Error::InvalidInput(format!("unknown degree method {method}")))),
        };
        *out = brouwer_degree(u, r, slice(y, u.grid.m)?, method)?;
        Ok(SbtStatus::Ok)
    })
}

/// Π∘(φ_ε * u) with a constant kernel scale ε.
#[no_mangle]
pub unsafe extern "C" fn sbt_mollify_project(
    u: *const SbtGridMap,
    m: *const SbtManifold,
    eps: f64,
    out: *mut *mut SbtGridMap,
) -> SbtStatus {
    guard(|| {
        if u.is_null() || m.is_null() {
            return Err(null());
        }
        put_map(out, mollify_project(&(*u).0, &(*m).0, eps, 4))
    })
}

/// Run the bounded-approximation schedule described by `law_json` (a
/// schedule law; `"{}"` for the defaults) with default claim constants.
/// On success or non-convergence, `out` receives the last juxtaposed map and
/// `final_rel` its relative W^{1,p} error. Returns `NotConverged` when the
/// tolerance is missed, `TrimmingFailed` when a bad cube cannot be trimmed.
#[no_mangle]
pub unsafe extern "C" fn sbt_approximate(
    u: *const SbtGridMap,
    m: *const SbtManifold,
    p: f64,
    law_json: *const c_char,
    tolerance: f64,
    out: *mut *mut SbtGridMap,
    final_rel: *mut f64,
) -> SbtStatus {
    guard(|| {
        if u.is_null() || m.is_null() || out.is_null() || final_rel.is_null() {
            return Err(null());
        }
        let (u, man) = (&(*u).0, &(*m).0);
        let law: ScheduleLaw = serde_json::from_str(cstr(law_json)?)?;
        let c = ClaimConstants::default();
        let sched = StageSchedule::from_law(&law, man, u.grid.res, &c)?;
        let rep = converge(u, man, p, &sched, &c, tolerance)?;
        *final_rel = rep.final_rel;
        if let Some(last) = rep.outputs.last() {
            *out = Box::into_raw(Box::new(SbtGridMap(last.clone())));
        } else {
            *out = ptr::null_mut();
        }
        if rep.converged {
            return Ok(SbtStatus::Ok);
        }
        set_error(rep.flag.clone().unwrap_or_default());
        Ok(if rep.trim_failure.is_some() { SbtStatus::TrimmingFailed } else { SbtStatus::NotConverged })
    })
}
