//! C ABI over the polyspline library.
//!
//! Models are opaque `PsModel` handles owned by the caller and released with
//! `ps_model_free`. Every fallible call returns a `PsStatus`; on failure the
//! message is available from `ps_last_error` on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use polyspline::checkpoint;
use polyspline::geometry::Points;
use polyspline::model::{ModelConfig, PolySplineModel};
use polyspline::problems::{Problem, DATA_SEED};
use polyspline::training::{self, LsgdMode, TrainConfig};
use polyspline::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfDomain = 3,
    DimensionMismatch = 4,
    Singular = 5,
    NonFinite = 6,
    Io = 7,
    Format = 8,
    Panic = 9,
}

/// LSGD mode selector for `ps_model_train`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsLsgdMode {
    Layer = 0,
    Callback = 1,
}

/// Opaque model handle.
pub struct PsModel {
    inner: PolySplineModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PsStatus {
    match e {
        Error::InvalidInput(_) | Error::InvalidSpec(_) | Error::QuadratureOrderRequired => PsStatus::InvalidArgument,
        Error::OutOfDomain { .. } => PsStatus::OutOfDomain,
        Error::DimensionMismatch(_) => PsStatus::DimensionMismatch,
        Error::Singular(_) => PsStatus::Singular,
        Error::NonFinite { .. } => PsStatus::NonFinite,
        Error::Io(_) => PsStatus::Io,
        Error::Json(_) | Error::Csv(_) | Error::Checkpoint(_) => PsStatus::Format,
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

/// Run `f`, translating errors and panics into a status and a message.
fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PsStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            PsStatus::NullPointer
        }
        Ok(Err(Failure::Arg(msg))) => {
            set_error(msg);
            PsStatus::InvalidArgument
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            PsStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const PsModel) -> Result<&'a PsModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

unsafe fn model_mut<'a>(m: *mut PsModel) -> Result<&'a mut PsModel, Failure> {
    m.as_mut().ok_or(Failure::Null("model"))
}

unsafe fn str_arg<'a>(s: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(s).to_str().map_err(|_| Failure::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn store(out: *mut *mut PsModel, model: PolySplineModel) -> Result<(), Failure> {
    *out = Box::into_raw(Box::new(PsModel { inner: model }));
    Ok(())
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ps_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Create a model on `[0, 1]^dim` with uniform knots, seeded random gating
/// and zero coefficients.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_new(
    dim: usize,
    n_splines: usize,
    n_cells: usize,
    degree: usize,
    seed: u64,
    out: *mut *mut PsModel,
) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = PolySplineModel::new(&ModelConfig::new(dim, n_splines, n_cells, degree), &mut rng)?;
        store(out, model)
    })
}

/// Load a model from a JSON checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer to
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let path = str_arg(path, "path")?;
        store(out, checkpoint::load(Path::new(path))?)
    })
}

/// Write the model as a JSON checkpoint.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_model_save(model: *const PsModel, path: *const c_char) -> PsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let path = str_arg(path, "path")?;
        Ok(checkpoint::save(&m.inner, Path::new(path))?)
    })
}

/// Release a handle. NULL is ignored.
///
/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Spatial dimension of the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_dim(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.dim())
}

/// Number of expert coefficients, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_n_coeffs(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_coeffs())
}

/// Copy the coefficients into `out`, which must hold exactly
/// `ps_model_n_coeffs` values.
///
/// # Safety
/// `model` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ps_model_get_coeffs(model: *const PsModel, out: *mut f64, len: usize) -> PsStatus {
    guard(|| {
        let m = model_ref(model)?;
        if len != m.inner.n_coeffs() {
            return Err(Failure::Arg(format!("expected {} coefficients, got {len}", m.inner.n_coeffs())));
        }
        slice_out(out, len, "out")?.copy_from_slice(&m.inner.coeffs);
        Ok(())
    })
}

/// Replace the coefficients.
///
/// # Safety
/// `model` must be a live handle and `coeffs` valid for `len` reads.
#[no_mangle]
pub unsafe extern "C" fn ps_model_set_coeffs(model: *mut PsModel, coeffs: *const f64, len: usize) -> PsStatus {
    guard(|| {
        let m = model_mut(model)?;
        let c = slice_arg(coeffs, len, "coeffs")?;
        Ok(m.inner.set_coeffs(c)?)
    })
}

/// Evaluate the model at `n_points` points stored row-major in `coords`
/// (`n_points * dim` values). Writes `n_points` values to `values` and, if
/// `grads` is not NULL, `n_points * dim` gradient entries row-major.
///
/// # Safety
/// `model` must be a live handle; `coords`, `values` and a non-NULL `grads`
/// must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn ps_model_eval(
    model: *const PsModel,
    coords: *const f64,
    n_points: usize,
    values: *mut f64,
    grads: *mut f64,
) -> PsStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = m.inner.dim();
        let xs = slice_arg(coords, n_points * d, "coords")?;
        let out = slice_out(values, n_points, "values")?;
        if n_points == 0 {
            return Ok(());
        }
        let points = Points::new(d, xs.to_vec())?;
        let (y, g) = m.inner.forward(&points)?;
        out.copy_from_slice(&y);
        if !grads.is_null() {
            let gout = slice_out(grads, n_points * d, "grads")?;
            for i in 0..n_points {
                for a in 0..d {
                    gout[i * d + a] = g[(i, a)];
                }
            }
        }
        Ok(())
    })
}

/// Train the model on a named benchmark problem (`p1-sine`, `p2-kinks`,
/// `p3-poisson1d`, `p4-slit`) with that problem's settings, overriding the
/// epoch count when `epochs > 0`. Writes the final loss to `loss` if it is
/// not NULL.
///
/// # Safety
/// `model` must be a live handle and `problem` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ps_model_train(
    model: *mut PsModel,
    problem: *const c_char,
    mode: PsLsgdMode,
    epochs: usize,
    seed: u64,
    loss: *mut f64,
) -> PsStatus {
    guard(|| {
        let m = model_mut(model)?;
        let name = str_arg(problem, "problem")?;
        let mode = match mode {
            PsLsgdMode::Layer => LsgdMode::Layer,
            PsLsgdMode::Callback => LsgdMode::Callback,
        };
        let mut cfg = TrainConfig::for_problem(name, m.inner.poly.degree)?.with_mode(name, mode);
        if epochs > 0 {
            cfg.epochs = epochs;
        }
        cfg.seed = seed;
        let problem = Problem::by_name(name, DATA_SEED, cfg.penalty)?;
        let outcome = training::train(&mut m.inner, &problem, &cfg)?;
        if !loss.is_null() {
            *loss = outcome.trace.last().map_or(f64::NAN, |r| r.loss);
        }
        Ok(())
    })
}
