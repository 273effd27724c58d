//! C ABI for the subfit library.
//!
//! Conventions: objects cross the boundary as opaque handles owned by the
//! caller until passed to the matching `_free`; fallible calls either
//! return a [`SubfitStatus`] or a null handle, and the message behind the
//! most recent failure on the current thread is available through
//! [`subfit_last_error_message`]. All functions catch panics, so no Rust
//! unwinding ever crosses into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use subfit::cli::commands::{load_context, run_phase, Overrides, Phase};
use subfit::error::Error;
use subfit::numerics::{read_matrix, write_matrix, Matrix};
use subfit::projections::{
    activation_error, build_dct, build_random, build_svd, build_wsvd, load_projection,
    recon_error, save_projection, ProjectionPair,
};

/// Status codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubfitStatus {
    Ok = 0,
    /// Unspecified failure (I/O, serialization, panic).
    Error = 1,
    /// Invalid configuration or arguments.
    ConfigError = 2,
    /// Numerical failure (non-convergence, rank deficiency, divergence).
    NumericalError = 3,
    /// Null pointer or malformed string input.
    InvalidInput = 4,
}

/// Projection constructions selectable through the C API. Whitened SVD has
/// its own entry point because it needs the input second moment.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubfitProjectionKind {
    Svd = 0,
    Dct = 1,
    Rand = 2,
}

/// Opaque dense row-major f64 matrix.
pub struct SubfitMatrix(Matrix);

/// Opaque frozen projection pair.
pub struct SubfitProjection(ProjectionPair);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> SubfitStatus {
    match err.exit_code() {
        2 => SubfitStatus::ConfigError,
        3 => SubfitStatus::NumericalError,
        _ => SubfitStatus::Error,
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn subfit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, SubfitStatus> {
    if ptr.is_null() {
        set_error(format!("{what} is null"));
        return Err(SubfitStatus::InvalidInput);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(format!("{what} is not valid UTF-8"));
        SubfitStatus::InvalidInput
    })
}

fn guard_status(body: impl FnOnce() -> SubfitStatus) -> SubfitStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SubfitStatus::Error
        }
    }
}

fn guard_ptr<T>(body: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(ptr) => ptr,
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

fn box_matrix(m: Matrix) -> *mut SubfitMatrix {
    Box::into_raw(Box::new(SubfitMatrix(m)))
}

fn box_projection(p: ProjectionPair) -> *mut SubfitProjection {
    Box::into_raw(Box::new(SubfitProjection(p)))
}

macro_rules! try_ref {
    ($ptr:expr, $what:literal, $fail:expr) => {
        match unsafe { $ptr.as_ref() } {
            Some(r) => r,
            None => {
                set_error(concat!($what, " is null"));
                return $fail;
            }
        }
    };
}

// ------------------------------------------------------------------ matrix

/// New matrix from a row-major buffer of `rows * cols` doubles.
/// Returns null on invalid input.
#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_create(
    rows: u64,
    cols: u64,
    data: *const f64,
) -> *mut SubfitMatrix {
    guard_ptr(|| {
        if data.is_null() {
            set_error("data is null");
            return std::ptr::null_mut();
        }
        let len = (rows * cols) as usize;
        let slice = unsafe { std::slice::from_raw_parts(data, len) };
        match Matrix::from_vec(rows as usize, cols as usize, slice.to_vec()) {
            Ok(m) => box_matrix(m),
            Err(e) => {
                set_error(e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Read an SBMX v1 file. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_read(path: *const c_char) -> *mut SubfitMatrix {
    guard_ptr(|| {
        let path = match unsafe { str_arg(path, "path") } {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match read_matrix(path) {
            Ok(m) => box_matrix(m),
            Err(e) => {
                set_error(e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Write a matrix as an SBMX v1 file.
#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_write(
    path: *const c_char,
    matrix: *const SubfitMatrix,
) -> SubfitStatus {
    guard_status(|| {
        let matrix = try_ref!(matrix, "matrix", SubfitStatus::InvalidInput);
        let path = match unsafe { str_arg(path, "path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_matrix(path, &matrix.0) {
            Ok(()) => SubfitStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_rows(matrix: *const SubfitMatrix) -> u64 {
    match unsafe { matrix.as_ref() } {
        Some(m) => m.0.rows() as u64,
        None => 0,
    }
}

#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_cols(matrix: *const SubfitMatrix) -> u64 {
    match unsafe { matrix.as_ref() } {
        Some(m) => m.0.cols() as u64,
        None => 0,
    }
}

/// Copy the row-major contents into `out`, which must hold `len` doubles
/// with `len == rows * cols`.
#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_copy_data(
    matrix: *const SubfitMatrix,
    out: *mut f64,
    len: u64,
) -> SubfitStatus {
    guard_status(|| {
        let matrix = try_ref!(matrix, "matrix", SubfitStatus::InvalidInput);
        if out.is_null() {
            set_error("out is null");
            return SubfitStatus::InvalidInput;
        }
        let data = matrix.0.as_slice();
        if len as usize != data.len() {
            set_error(format!("buffer holds {len} values, matrix has {}", data.len()));
            return SubfitStatus::InvalidInput;
        }
        unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), out, data.len()) };
        SubfitStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn subfit_matrix_free(matrix: *mut SubfitMatrix) {
    if !matrix.is_null() {
        drop(unsafe { Box::from_raw(matrix) });
    }
}

// -------------------------------------------------------------- projections

/// Build a projection pair from a frozen weight matrix. `seed` is used by
/// the random construction and `permute` by the DCT one; both are ignored
/// otherwise. Returns null on failure.
#[no_mangle]
pub unsafe extern "C" fn subfit_projection_build(
    w0: *const SubfitMatrix,
    kind: SubfitProjectionKind,
    rank: u64,
    seed: u64,
    permute: bool,
) -> *mut SubfitProjection {
    guard_ptr(|| {
        let w0 = try_ref!(w0, "w0", std::ptr::null_mut());
        let rank = rank as usize;
        let built = match kind {
            SubfitProjectionKind::Svd => build_svd(&w0.0, rank),
            SubfitProjectionKind::Dct => build_dct(&w0.0, rank, permute),
            SubfitProjectionKind::Rand => build_random(&w0.0, rank, seed),
        };
        match built {
            Ok(p) => box_projection(p),
            Err(e) => {
                set_error(e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Whitened-SVD projection for the given input second moment; `ridge` is
/// added to its eigenvalues (pass a negative value for the default
/// `1e-6 * trace / dim`).
#[no_mangle]
pub unsafe extern "C" fn subfit_projection_build_whitened(
    w0: *const SubfitMatrix,
    sigma_xx: *const SubfitMatrix,
    rank: u64,
    ridge: f64,
) -> *mut SubfitProjection {
    guard_ptr(|| {
        let w0 = try_ref!(w0, "w0", std::ptr::null_mut());
        let sigma = try_ref!(sigma_xx, "sigma_xx", std::ptr::null_mut());
        let ridge = if ridge < 0.0 {
            subfit::projections::default_ridge(&sigma.0)
        } else {
            ridge
        };
        match build_wsvd(&w0.0, &sigma.0, rank as usize, ridge) {
            Ok(p) => box_projection(p),
            Err(e) => {
                set_error(e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

/// Load a projection pair from a directory written by `subfit_projection_save`.
#[no_mangle]
pub unsafe extern "C" fn subfit_projection_load(dir: *const c_char) -> *mut SubfitProjection {
    guard_ptr(|| {
        let dir = match unsafe { str_arg(dir, "dir") } {
            Ok(d) => d,
            Err(_) => return std::ptr::null_mut(),
        };
        match load_projection(dir) {
            Ok(p) => box_projection(p),
            Err(e) => {
                set_error(e.to_string());
                std::ptr::null_mut()
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn subfit_projection_save(
    dir: *const c_char,
    projection: *const SubfitProjection,
) -> SubfitStatus {
    guard_status(|| {
        let projection = try_ref!(projection, "projection", SubfitStatus::InvalidInput);
        let dir = match unsafe { str_arg(dir, "dir") } {
            Ok(d) => d,
            Err(s) => return s,
        };
        match save_projection(dir, &projection.0) {
            Ok(()) => SubfitStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn subfit_projection_rank(projection: *const SubfitProjection) -> u64 {
    match unsafe { projection.as_ref() } {
        Some(p) => p.0.rank as u64,
        None => 0,
    }
}

/// Copy of the left factor `A` (rows(W0) x rank). Caller frees.
#[no_mangle]
pub unsafe extern "C" fn subfit_projection_factor_a(
    projection: *const SubfitProjection,
) -> *mut SubfitMatrix {
    guard_ptr(|| {
        let projection = try_ref!(projection, "projection", std::ptr::null_mut());
        box_matrix(projection.0.a.clone())
    })
}

/// Copy of the right factor `B` (rank x cols(W0)). Caller frees.
#[no_mangle]
pub unsafe extern "C" fn subfit_projection_factor_b(
    projection: *const SubfitProjection,
) -> *mut SubfitMatrix {
    guard_ptr(|| {
        let projection = try_ref!(projection, "projection", std::ptr::null_mut());
        box_matrix(projection.0.b.clone())
    })
}

/// Frobenius reconstruction error `||W0 - A B||_F`.
#[no_mangle]
pub unsafe extern "C" fn subfit_recon_error(
    w0: *const SubfitMatrix,
    projection: *const SubfitProjection,
    out: *mut f64,
) -> SubfitStatus {
    guard_status(|| {
        let w0 = try_ref!(w0, "w0", SubfitStatus::InvalidInput);
        let projection = try_ref!(projection, "projection", SubfitStatus::InvalidInput);
        if out.is_null() {
            set_error("out is null");
            return SubfitStatus::InvalidInput;
        }
        match recon_error(&w0.0, &projection.0) {
            Ok(v) => {
                unsafe { *out = v };
                SubfitStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Expected activation error `tr((W0 - AB)^T Sigma (W0 - AB))`.
#[no_mangle]
pub unsafe extern "C" fn subfit_activation_error(
    w0: *const SubfitMatrix,
    projection: *const SubfitProjection,
    sigma_xx: *const SubfitMatrix,
    out: *mut f64,
) -> SubfitStatus {
    guard_status(|| {
        let w0 = try_ref!(w0, "w0", SubfitStatus::InvalidInput);
        let projection = try_ref!(projection, "projection", SubfitStatus::InvalidInput);
        let sigma = try_ref!(sigma_xx, "sigma_xx", SubfitStatus::InvalidInput);
        if out.is_null() {
            set_error("out is null");
            return SubfitStatus::InvalidInput;
        }
        match activation_error(&w0.0, &projection.0, &sigma.0) {
            Ok(v) => {
                unsafe { *out = v };
                SubfitStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn subfit_projection_free(projection: *mut SubfitProjection) {
    if !projection.is_null() {
        drop(unsafe { Box::from_raw(projection) });
    }
}

// ---------------------------------------------------------------- pipeline

fn parse_phase(name: &str) -> Option<Phase> {
    Some(match name {
        "gen-data" => Phase::GenData,
        "pretrain" => Phase::Pretrain,
        "project" => Phase::Project,
        "train-map" => Phase::TrainMap,
        "fit-swag" => Phase::FitSwag,
        "fit-laplace" => Phase::FitLaplace,
        "evaluate" => Phase::Evaluate,
        "ood" => Phase::Ood,
        _ => None?,
    })
}

/// Run one experiment phase from a JSON run config, exactly like the
/// `subfit` binary. `posterior` selects the artifacts for `evaluate` and
/// `ood` ("map", "swag", or "laplace"); pass null elsewhere.
#[no_mangle]
pub unsafe extern "C" fn subfit_run_phase(
    config_path: *const c_char,
    phase: *const c_char,
    posterior: *const c_char,
) -> SubfitStatus {
    guard_status(|| {
        let config_path = match unsafe { str_arg(config_path, "config_path") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let phase_name = match unsafe { str_arg(phase, "phase") } {
            Ok(p) => p,
            Err(s) => return s,
        };
        let Some(phase) = parse_phase(phase_name) else {
            set_error(format!("unknown phase `{phase_name}`"));
            return SubfitStatus::InvalidInput;
        };
        let posterior = if posterior.is_null() {
            None
        } else {
            match unsafe { str_arg(posterior, "posterior") } {
                Ok(p) => match p.parse() {
                    Ok(kind) => Some(kind),
                    Err(e) => {
                        set_error(format!("{e}"));
                        return SubfitStatus::InvalidInput;
                    }
                },
                Err(s) => return s,
            }
        };
        let overrides = Overrides {
            posterior,
            ..Default::default()
        };
        let result =
            load_context(Path::new(config_path), &overrides).and_then(|ctx| run_phase(phase, &ctx, &overrides));
        match result {
            Ok(()) => SubfitStatus::Ok,
            Err(e) => {
                set_error(e.to_string());
                status_of(&e)
            }
        }
    })
}
