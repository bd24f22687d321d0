//! C ABI over the otmerge library.
//!
//! Conventions:
//! - every fallible function returns an [`OtmStatus`]; `OTM_STATUS_OK` is 0;
//! - on failure a message is available from [`otm_last_error_message`] on
//!   the same thread until the next call;
//! - matrices are dense, row-major `double` buffers;
//! - handles ([`OtmPlan`], [`OtmContainer`]) are opaque and released with
//!   their `*_free` function; passing NULL to a free function is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use ndarray::{ArrayView1, ArrayView2};
use otmerge::sinkhorn::{self, SolverConfig, SolverMode, TransportPlan};
use otmerge::tensor_store::{self, Container};
use otmerge::{fusion, hierarchy, stats, Error};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtmStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Infeasible = 3,
    NumericalFailure = 4,
    Io = 5,
    Format = 6,
    Corruption = 7,
    ContainerIntegrity = 8,
    MissingInput = 9,
    Consistency = 10,
    UnsupportedScale = 11,
    InsufficientSamples = 12,
    EmptySequence = 13,
    Json = 14,
    BufferTooSmall = 15,
    Internal = 16,
}

impl From<&Error> for OtmStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Validation(_) => OtmStatus::Validation,
            Error::ContainerIntegrity(_) => OtmStatus::ContainerIntegrity,
            Error::Format(_) => OtmStatus::Format,
            Error::Corruption(_) => OtmStatus::Corruption,
            Error::InsufficientSamples { .. } => OtmStatus::InsufficientSamples,
            Error::EmptySequence { .. } => OtmStatus::EmptySequence,
            Error::Infeasible(_) => OtmStatus::Infeasible,
            Error::NumericalFailure { .. } => OtmStatus::NumericalFailure,
            Error::MissingInput(_) => OtmStatus::MissingInput,
            Error::Consistency(_) => OtmStatus::Consistency,
            Error::UnsupportedScale(_) => OtmStatus::UnsupportedScale,
            Error::Side { source, .. } => OtmStatus::from(source.as_ref()),
            Error::Io { .. } => OtmStatus::Io,
            Error::Json(_) => OtmStatus::Json,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtmSolverMode {
    Dense = 0,
    LogDomain = 1,
    Streaming = 2,
}

/// Sinkhorn settings; see `otm_solver_config_feature` / `_layer` for defaults.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtmSolverConfig {
    pub epsilon: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub mode: OtmSolverMode,
    pub block_size: usize,
    pub stability_eps: f64,
}

impl From<&SolverConfig> for OtmSolverConfig {
    fn from(c: &SolverConfig) -> Self {
        OtmSolverConfig {
            epsilon: c.epsilon,
            max_iters: c.max_iters,
            tol: c.tol,
            mode: match c.mode {
                SolverMode::Dense => OtmSolverMode::Dense,
                SolverMode::LogDomain => OtmSolverMode::LogDomain,
                SolverMode::Streaming => OtmSolverMode::Streaming,
            },
            block_size: c.block_size,
            stability_eps: c.stability_eps,
        }
    }
}

impl From<&OtmSolverConfig> for SolverConfig {
    fn from(c: &OtmSolverConfig) -> Self {
        SolverConfig {
            epsilon: c.epsilon,
            max_iters: c.max_iters,
            tol: c.tol,
            mode: match c.mode {
                OtmSolverMode::Dense => SolverMode::Dense,
                OtmSolverMode::LogDomain => SolverMode::LogDomain,
                OtmSolverMode::Streaming => SolverMode::Streaming,
            },
            block_size: c.block_size,
            stability_eps: c.stability_eps,
        }
    }
}

/// Convergence summary of a solved plan.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtmPlanInfo {
    pub rows: usize,
    pub cols: usize,
    pub converged: bool,
    pub final_violation: f64,
    pub iterations_used: usize,
}

/// Opaque transport plan.
pub struct OtmPlan(TransportPlan);

/// Opaque, fully decoded OTMB container.
pub struct OtmContainer(Container);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

struct Failure(OtmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(OtmStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(OtmStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OtmStatus {
    clear_last_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OtmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            OtmStatus::Internal
        }
    }
}

unsafe fn matrix<'a>(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<ArrayView2<'a, f64>, Failure> {
    if rows == 0 || cols == 0 {
        return Ok(ArrayView2::from_shape((rows, cols), &[]).expect("empty view"));
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    let data = slice::from_raw_parts(ptr, rows * cols);
    Ok(ArrayView2::from_shape((rows, cols), data).expect("length matches shape"))
}

unsafe fn vector<'a>(ptr: *const f64, len: usize, what: &str) -> Result<ArrayView1<'a, f64>, Failure> {
    if len == 0 {
        return Ok(ArrayView1::from(&[]));
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(ArrayView1::from(slice::from_raw_parts(ptr, len)))
}

unsafe fn out_slice<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(ptr, len))
}

unsafe fn out_ref<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn otm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otm_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// Feature-level defaults: eps 0.1, 200 iterations, tolerance 1e-6.
#[no_mangle]
pub extern "C" fn otm_solver_config_feature() -> OtmSolverConfig {
    OtmSolverConfig::from(&SolverConfig::feature_default())
}

/// Layer-level defaults: eta 0.1, 1000 iterations, tolerance 1e-9.
#[no_mangle]
pub extern "C" fn otm_solver_config_layer() -> OtmSolverConfig {
    OtmSolverConfig::from(&SolverConfig::layer_default())
}

/// Solves entropic OT for an `n x m` cost. `a` / `b` may be NULL for
/// uniform marginals. Hitting the iteration cap is not an error; inspect
/// `otm_plan_info`.
///
/// # Safety
/// `cost` must point to `n * m` doubles, `a` to `n` and `b` to `m` (or be
/// NULL), `config` to a valid config and `out_plan` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn otm_sinkhorn_solve(
    cost: *const f64,
    n: usize,
    m: usize,
    a: *const f64,
    b: *const f64,
    config: *const OtmSolverConfig,
    out_plan: *mut *mut OtmPlan,
) -> OtmStatus {
    guard(|| {
        let out = out_ref(out_plan, "out_plan")?;
        *out = std::ptr::null_mut();
        let cfg = SolverConfig::from(config.as_ref().ok_or_else(|| null("config"))?);
        let cost = matrix(cost, n, m, "cost")?;
        let a = if a.is_null() { sinkhorn::uniform(n) } else { vector(a, n, "a")?.to_owned() };
        let b = if b.is_null() { sinkhorn::uniform(m) } else { vector(b, m, "b")?.to_owned() };
        let plan = sinkhorn::solve_with_mode(cost, a.view(), b.view(), &cfg)?;
        *out = Box::into_raw(Box::new(OtmPlan(plan)));
        Ok(())
    })
}

/// # Safety
/// `plan` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otm_plan_info(plan: *const OtmPlan, out: *mut OtmPlanInfo) -> OtmStatus {
    guard(|| {
        let p = &plan.as_ref().ok_or_else(|| null("plan"))?.0;
        let (rows, cols) = p.dim();
        *out_ref(out, "out")? = OtmPlanInfo {
            rows,
            cols,
            converged: p.converged,
            final_violation: p.final_violation,
            iterations_used: p.iterations_used,
        };
        Ok(())
    })
}

/// Copies the plan row-major into `out`, which must hold `rows * cols`
/// doubles (`len` is checked).
///
/// # Safety
/// `plan` must be a live handle and `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn otm_plan_copy(plan: *const OtmPlan, out: *mut f64, len: usize) -> OtmStatus {
    guard(|| {
        let p = &plan.as_ref().ok_or_else(|| null("plan"))?.0;
        if len < p.plan.len() {
            return Err(Failure(
                OtmStatus::BufferTooSmall,
                format!("plan needs {} doubles, buffer holds {len}", p.plan.len()),
            ));
        }
        let dst = out_slice(out, p.plan.len(), "out")?;
        for (d, s) in dst.iter_mut().zip(p.plan.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// # Safety
/// `plan` must come from `otm_sinkhorn_solve` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn otm_plan_free(plan: *mut OtmPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Pearson cost `1 - rho` between the columns of `x` (`t x n`) and `y`
/// (`t x m`), written to `out` (`n x m`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn otm_pearson_cost(x: *const f64, t: usize, n: usize, y: *const f64, m: usize, out: *mut f64) -> OtmStatus {
    guard(|| {
        let c = stats::pearson_cost(matrix(x, t, n, "x")?, matrix(y, t, m, "y")?)?;
        let dst = out_slice(out, n * m, "out")?;
        for (d, s) in dst.iter_mut().zip(c.0.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Fraction of the plan's mass in its `k` largest entries.
///
/// # Safety
/// `q` must hold `n * m` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otm_mass_explained(q: *const f64, n: usize, m: usize, k: usize, out: *mut f64) -> OtmStatus {
    guard(|| {
        let q = matrix(q, n, m, "q")?;
        *out_ref(out, "out")? = hierarchy::transport_mass_explained(q, k);
        Ok(())
    })
}

/// Builds the coordinate maps from `q_in` (`a_in x b_in`) and `q_out`
/// (`a_out x b_out`) and writes `phi_out W_B phi_in` (`a_out x a_in`) for
/// `w_b` (`b_out x b_in`).
///
/// # Safety
/// Buffers must hold the stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn otm_transported_operator(
    q_in: *const f64,
    a_in: usize,
    b_in: usize,
    q_out: *const f64,
    a_out: usize,
    b_out: usize,
    w_b: *const f64,
    scale: bool,
    out: *mut f64,
) -> OtmStatus {
    guard(|| {
        let maps = fusion::coordinate_maps(matrix(q_in, a_in, b_in, "q_in")?, matrix(q_out, a_out, b_out, "q_out")?, scale)?;
        let op = fusion::transported_operator(&maps, matrix(w_b, b_out, b_in, "w_b")?)?;
        let dst = out_slice(out, a_out * a_in, "out")?;
        for (d, s) in dst.iter_mut().zip(op.iter()) {
            *d = *s;
        }
        Ok(())
    })
}

/// Indices of the `k` largest scores (ties to the lower index), ascending.
/// `out_indices` must hold `min(k, len)` entries; the count is written to
/// `out_count`.
///
/// # Safety
/// `scores` must hold `len` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn otm_select_topk(scores: *const f64, len: usize, k: usize, out_indices: *mut usize, out_count: *mut usize) -> OtmStatus {
    guard(|| {
        let mask = fusion::select_topk(vector(scores, len, "scores")?, k);
        let dst = out_slice(out_indices, mask.len(), "out_indices")?;
        dst.copy_from_slice(&mask.indices);
        *out_ref(out_count, "out_count")? = mask.len();
        Ok(())
    })
}

/// Opens and fully validates an OTMB container.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otm_container_open(path: *const c_char, out: *mut *mut OtmContainer) -> OtmStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = std::ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(OtmStatus::Validation, "path is not UTF-8".into()))?;
        let c = tensor_store::read_container(Path::new(path))?;
        *out = Box::into_raw(Box::new(OtmContainer(c)));
        Ok(())
    })
}

/// # Safety
/// `c` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otm_container_num_records(c: *const OtmContainer, out: *mut usize) -> OtmStatus {
    guard(|| {
        *out_ref(out, "out")? = c.as_ref().ok_or_else(|| null("container"))?.0.records.len();
        Ok(())
    })
}

fn copy_str(s: &str, buf: *mut c_char, buf_len: usize, needed: *mut usize) -> Result<(), Failure> {
    // SAFETY: callers pass either NULL or a buffer of buf_len bytes.
    unsafe {
        if let Some(n) = needed.as_mut() {
            *n = s.len() + 1;
        }
        if buf_len < s.len() + 1 {
            return Err(Failure(
                OtmStatus::BufferTooSmall,
                format!("string needs {} bytes, buffer holds {buf_len}", s.len() + 1),
            ));
        }
        let dst = out_slice(buf.cast::<u8>(), s.len() + 1, "buf")?;
        dst[..s.len()].copy_from_slice(s.as_bytes());
        dst[s.len()] = 0;
    }
    Ok(())
}

/// Name of record `index` (records are sorted by name). `needed` (may be
/// NULL) receives the byte length including the terminator, also on
/// `OTM_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `c` must be a live handle; `buf` must hold `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn otm_container_record_name(c: *const OtmContainer, index: usize, buf: *mut c_char, buf_len: usize, needed: *mut usize) -> OtmStatus {
    guard(|| {
        let c = &c.as_ref().ok_or_else(|| null("container"))?.0;
        let rec = c.records.get(index).ok_or_else(|| {
            Failure(OtmStatus::Validation, format!("record index {index} out of range ({} records)", c.records.len()))
        })?;
        copy_str(&rec.name, buf, buf_len, needed)
    })
}

/// Canonical JSON manifest of the container.
///
/// # Safety
/// As for `otm_container_record_name`.
#[no_mangle]
pub unsafe extern "C" fn otm_container_manifest_json(c: *const OtmContainer, buf: *mut c_char, buf_len: usize, needed: *mut usize) -> OtmStatus {
    guard(|| {
        let c = &c.as_ref().ok_or_else(|| null("container"))?.0;
        copy_str(&c.manifest.to_canonical_json(), buf, buf_len, needed)
    })
}

unsafe fn record<'a>(c: *const OtmContainer, name: *const c_char) -> Result<&'a tensor_store::TensorRecord, Failure> {
    let c = &c.as_ref().ok_or_else(|| null("container"))?.0;
    if name.is_null() {
        return Err(null("name"));
    }
    let name = CStr::from_ptr(name)
        .to_str()
        .map_err(|_| Failure(OtmStatus::Validation, "name is not UTF-8".into()))?;
    Ok(c.require(name)?)
}

/// Shape of a named record. `shape` must hold `max_rank` entries; the rank
/// is written to `out_rank`.
///
/// # Safety
/// `c` live, `name` NUL-terminated, outputs writable.
#[no_mangle]
pub unsafe extern "C" fn otm_container_record_shape(c: *const OtmContainer, name: *const c_char, shape: *mut usize, max_rank: usize, out_rank: *mut usize) -> OtmStatus {
    guard(|| {
        let rec = record(c, name)?;
        *out_ref(out_rank, "out_rank")? = rec.shape.len();
        if max_rank < rec.shape.len() {
            return Err(Failure(
                OtmStatus::BufferTooSmall,
                format!("record has rank {}, buffer holds {max_rank}", rec.shape.len()),
            ));
        }
        out_slice(shape, rec.shape.len(), "shape")?.copy_from_slice(&rec.shape);
        Ok(())
    })
}

/// Reads a named record as doubles (float32 payloads are widened).
///
/// # Safety
/// `c` live, `name` NUL-terminated, `out` holds `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn otm_container_read_f64(c: *const OtmContainer, name: *const c_char, out: *mut f64, len: usize) -> OtmStatus {
    guard(|| {
        let values = record(c, name)?.to_f64_vec();
        if len < values.len() {
            return Err(Failure(
                OtmStatus::BufferTooSmall,
                format!("record holds {} values, buffer {len}", values.len()),
            ));
        }
        out_slice(out, values.len(), "out")?.copy_from_slice(&values);
        Ok(())
    })
}

/// # Safety
/// `c` must come from `otm_container_open` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn otm_container_free(c: *mut OtmContainer) {
    if !c.is_null() {
        drop(Box::from_raw(c));
    }
}
