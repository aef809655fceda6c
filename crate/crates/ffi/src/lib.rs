//! C ABI over `ifa-core`.
//!
//! Every function returns an [`IfaStatus`]. On failure a message is kept per
//! thread and can be read with [`ifa_last_error`]. Archives and importance
//! matrices are opaque handles released with their `_free` functions.
//! Panics never cross the boundary; they surface as `IFA_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use ifa_core::archive::{ArchiveReader, Selector};
use ifa_core::campipe::sigma_from_percentiles;
use ifa_core::eval::{collect_inc_drop, JobResult};
use ifa_core::importance::{self, ImportanceMatrix};
use ifa_core::schemes::{weighted_features, Scheme};
use ifa_core::{ErrorKind, IfaError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IfaStatus {
    Ok = 0,
    /// A required pointer argument was null.
    Null = 1,
    Usage = 2,
    Data = 3,
    Io = 4,
    Panic = 5,
}

/// Opaque archive handle.
pub struct IfaArchive(ArchiveReader);

/// Opaque importance matrix handle.
pub struct IfaImportanceMatrix(ImportanceMatrix);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct IfaArchiveInfo {
    pub num_features: usize,
    pub num_classes: usize,
    pub spatial_rank: usize,
    pub sample_count: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &IfaError) -> IfaStatus {
    match e.kind() {
        ErrorKind::Usage => IfaStatus::Usage,
        ErrorKind::Data => IfaStatus::Data,
        ErrorKind::Io => IfaStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Ifa(IfaError),
}

impl From<IfaError> for Fail {
    fn from(e: IfaError) -> Self {
        Fail::Ifa(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IfaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IfaStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            IfaStatus::Null
        }
        Ok(Err(Fail::Ifa(e))) => {
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
            IfaStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| IfaError::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn scheme_from_code(code: u32) -> Result<Scheme, IfaError> {
    Scheme::ALL
        .get(code as usize)
        .copied()
        .ok_or_else(|| IfaError::InvalidArgument(format!("unknown scheme code {code}")))
}

/// Message for the last failed call on this thread, or null after a
/// successful one. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ifa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out_archive` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_archive_open(path: *const c_char, out_archive: *mut *mut IfaArchive) -> IfaStatus {
    guard(|| {
        let slot = out(out_archive, "out_archive")?;
        *slot = ptr::null_mut();
        let reader = ArchiveReader::open(path_arg(path)?)?;
        *slot = Box::into_raw(Box::new(IfaArchive(reader)));
        Ok(())
    })
}

/// # Safety
/// `archive` must come from [`ifa_archive_open`] and not be freed yet. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ifa_archive_free(archive: *mut IfaArchive) {
    if !archive.is_null() {
        drop(Box::from_raw(archive));
    }
}

/// # Safety
/// `archive` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_archive_info(archive: *const IfaArchive, info: *mut IfaArchiveInfo) -> IfaStatus {
    guard(|| {
        let m = deref(archive, "archive")?.0.manifest();
        *out(info, "info")? = IfaArchiveInfo {
            num_features: m.num_features,
            num_classes: m.num_classes,
            spatial_rank: m.spatial_rank,
            sample_count: m.sample_count,
        };
        Ok(())
    })
}

/// Copies up to `capacity` sample ids (ascending) into `ids` and stores the
/// total count in `count`. Call with `capacity = 0` to size the buffer.
///
/// # Safety
/// `ids` must hold `capacity` elements; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_archive_sample_ids(
    archive: *const IfaArchive,
    ids: *mut u64,
    capacity: usize,
    count: *mut usize,
) -> IfaStatus {
    guard(|| {
        let all = deref(archive, "archive")?.0.sample_ids();
        let dst = slice_mut(ids, capacity.min(all.len()), "ids")?;
        dst.copy_from_slice(&all[..dst.len()]);
        *out(count, "count")? = all.len();
        Ok(())
    })
}

/// Unified importance matrix over every labeled sample of the archive.
/// Scheme codes: 0 grad-cam, 1 grad-cam++, 2 xgrad-cam, 3 pixelwise-grad.
///
/// # Safety
/// `archive` must be a live handle; `out_matrix` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_im_build_unified(
    archive: *const IfaArchive,
    scheme: u32,
    out_matrix: *mut *mut IfaImportanceMatrix,
) -> IfaStatus {
    guard(|| {
        let slot = out(out_matrix, "out_matrix")?;
        *slot = ptr::null_mut();
        let reader = &deref(archive, "archive")?.0;
        let m = importance::build_im_unified(reader, &Selector::all(), scheme_from_code(scheme)?)?;
        *slot = Box::into_raw(Box::new(IfaImportanceMatrix(m)));
        Ok(())
    })
}

/// # Safety
/// `matrix` must be a live handle; `num_features` and `num_classes` writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_im_shape(
    matrix: *const IfaImportanceMatrix,
    num_features: *mut usize,
    num_classes: *mut usize,
) -> IfaStatus {
    guard(|| {
        let m = &deref(matrix, "matrix")?.0;
        *out(num_features, "num_features")? = m.num_features;
        *out(num_classes, "num_classes")? = m.num_classes;
        Ok(())
    })
}

/// Entry `(feature, class)`. Classes without samples read as NaN.
///
/// # Safety
/// `matrix` must be a live handle; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_im_get(
    matrix: *const IfaImportanceMatrix,
    feature: usize,
    class_id: usize,
    value: *mut f64,
) -> IfaStatus {
    guard(|| {
        let m = &deref(matrix, "matrix")?.0;
        if feature >= m.num_features || class_id >= m.num_classes {
            return Err(IfaError::InvalidArgument(format!(
                "entry ({feature}, {class_id}) outside {} x {}",
                m.num_features, m.num_classes
            ))
            .into());
        }
        *out(value, "value")? = if m.is_available(class_id) {
            m.get(feature, class_id)
        } else {
            f64::NAN
        };
        Ok(())
    })
}

/// # Safety
/// `matrix` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ifa_im_write_csv(matrix: *const IfaImportanceMatrix, path: *const c_char) -> IfaStatus {
    guard(|| {
        let m = &deref(matrix, "matrix")?.0;
        importance::write_im_csv(&path_arg(path)?, m)?;
        Ok(())
    })
}

/// # Safety
/// `matrix` must come from this library and not be freed yet. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn ifa_im_free(matrix: *mut IfaImportanceMatrix) {
    if !matrix.is_null() {
        drop(Box::from_raw(matrix));
    }
}

/// Parameters of `tanh(alpha * x + beta)` mapping `p10 -> 0.1`, `p90 -> 0.9`.
///
/// # Safety
/// `alpha` and `beta` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_sigma_from_percentiles(p10: f64, p90: f64, alpha: *mut f64, beta: *mut f64) -> IfaStatus {
    guard(|| {
        let s = sigma_from_percentiles(p10, p90)?;
        *out(alpha, "alpha")? = s.alpha;
        *out(beta, "beta")? = s.beta;
        Ok(())
    })
}

/// Applies the common-scale mapping in place.
///
/// # Safety
/// `values` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn ifa_apply_sigma(p10: f64, p90: f64, values: *mut f64, len: usize) -> IfaStatus {
    guard(|| {
        let s = sigma_from_percentiles(p10, p90)?;
        for v in slice_mut(values, len, "values")? {
            *v = s.apply(*v);
        }
        Ok(())
    })
}

/// Weighted features `W^f = w^f * A^f` for `num_features` feature-major
/// planes of `len / num_features` values each. `out_maps` receives `len` values.
///
/// # Safety
/// `features`, `grads` and `out_maps` must each hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn ifa_weighted_features(
    scheme: u32,
    features: *const f32,
    grads: *const f32,
    len: usize,
    num_features: usize,
    out_maps: *mut f64,
) -> IfaStatus {
    guard(|| {
        let scheme = scheme_from_code(scheme)?;
        let a = slice(features, len, "features")?;
        let g = slice(grads, len, "grads")?;
        let dst = slice_mut(out_maps, len, "out_maps")?;
        let (maps, _) = weighted_features(scheme, a, g, num_features)?;
        dst.copy_from_slice(&maps);
        Ok(())
    })
}

/// Average increase and average drop, in percent, from per-job scores
/// `y` (original input) and `o` (masked input).
///
/// # Safety
/// `y` and `o` must hold `len` elements; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ifa_collect_inc_drop(
    y: *const f64,
    o: *const f64,
    len: usize,
    average_increase: *mut f64,
    average_drop: *mut f64,
) -> IfaStatus {
    guard(|| {
        let y = slice(y, len, "y")?;
        let o = slice(o, len, "o")?;
        let results: Vec<JobResult> = y
            .iter()
            .zip(o)
            .enumerate()
            .map(|(i, (&y, &o))| JobResult {
                sample_id: i as u64,
                y,
                o,
            })
            .collect();
        let r = collect_inc_drop(&results)?;
        *out(average_increase, "average_increase")? = r.average_increase;
        *out(average_drop, "average_drop")? = r.average_drop;
        Ok(())
    })
}
