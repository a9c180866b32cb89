//! C ABI over the fmwiss core.
//!
//! Every fallible call returns an `int32_t` status: `FMWISS_OK` (0) or a
//! nonzero code. Codes below 10 belong to this layer; the rest are the core
//! error codes. The message for the most recent failure on the calling
//! thread is available from [`fmwiss_last_error_message`].
//!
//! Objects are opaque handles created by `*_new`/`*_load`/`*_read` and
//! released with the matching `*_free`; passing NULL to a free function is
//! a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fmwiss::coseg::binarize_topk;
use fmwiss::distill::{StudentConfig, StudentModel};
use fmwiss::memory_paste::MemoryBank;
use fmwiss::tensor::{Plane, RgbImage};
use fmwiss::{ClassId, Error, Taxonomy};

pub const FMWISS_OK: i32 = 0;
/// A required pointer argument was NULL.
pub const FMWISS_ERR_NULL: i32 = 1;
/// A string argument was not valid UTF-8.
pub const FMWISS_ERR_UTF8: i32 = 2;
/// The library panicked; the handle involved should be discarded.
pub const FMWISS_ERR_PANIC: i32 = 3;

// Core error codes, mirrored from `fmwiss::Error::code`.
pub const FMWISS_ERR_DUPLICATE_CLASS: i32 = 10;
pub const FMWISS_ERR_EMPTY_STEP: i32 = 11;
pub const FMWISS_ERR_STEP_OUT_OF_RANGE: i32 = 12;
pub const FMWISS_ERR_RESERVED_CLASS: i32 = 13;
pub const FMWISS_ERR_ZERO_VECTOR: i32 = 20;
pub const FMWISS_ERR_EMPTY_CLASS_SET: i32 = 21;
pub const FMWISS_ERR_DIM_MISMATCH: i32 = 22;
pub const FMWISS_ERR_BAD_PERCENTAGE: i32 = 23;
pub const FMWISS_ERR_UNKNOWN_CLASS: i32 = 24;
pub const FMWISS_ERR_EMPTY_FOREGROUND: i32 = 25;
pub const FMWISS_ERR_SHAPE_MISMATCH: i32 = 26;
pub const FMWISS_ERR_BACKEND_FAILURE: i32 = 27;
pub const FMWISS_ERR_NO_FOREGROUND: i32 = 30;
pub const FMWISS_ERR_BAD_TEMPERATURE: i32 = 31;
pub const FMWISS_ERR_NOT_OLD_CLASS: i32 = 40;
pub const FMWISS_ERR_EMPTY_BANK: i32 = 41;
pub const FMWISS_ERR_NON_FINITE: i32 = 50;
pub const FMWISS_ERR_MISSING_PSEUDO_LABELS: i32 = 51;
pub const FMWISS_ERR_ID_OUT_OF_RANGE: i32 = 60;
pub const FMWISS_ERR_MISSING_PREREQUISITE: i32 = 70;
pub const FMWISS_ERR_CONFIG: i32 = 71;
pub const FMWISS_ERR_FORMAT: i32 = 80;
pub const FMWISS_ERR_IO: i32 = 81;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Code(i32, String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FMWISS_OK
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            e.code()
        }
        Ok(Err(Failure::Code(c, m))) => {
            set_error(m);
            c
        }
        Err(_) => {
            set_error("internal panic".into());
            FMWISS_ERR_PANIC
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Code(FMWISS_ERR_NULL, format!("{what} is NULL")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Code(FMWISS_ERR_UTF8, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

/// Opaque class schedule.
pub struct FmwissTaxonomy(Taxonomy);

/// Opaque segmentation model.
pub struct FmwissModel(StudentModel);

/// Opaque memory bank.
pub struct FmwissBank(MemoryBank);

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn fmwiss_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fmwiss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a taxonomy from base classes and `n_steps` increments. Increment
/// `i` has `step_lens[i]` ids, stored back to back in `steps`.
///
/// # Safety
/// Array arguments must point to at least the stated number of elements;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_taxonomy_new(
    base: *const u16,
    n_base: usize,
    steps: *const u16,
    step_lens: *const usize,
    n_steps: usize,
    out: *mut *mut FmwissTaxonomy,
) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let base: Vec<ClassId> = slice(base, n_base, "base")?.iter().map(|&c| ClassId(c)).collect();
        let lens = slice(step_lens, n_steps, "step_lens")?;
        let flat = slice(steps, lens.iter().sum(), "steps")?;
        let mut incs = Vec::with_capacity(n_steps);
        let mut at = 0;
        for &n in lens {
            incs.push(flat[at..at + n].iter().map(|&c| ClassId(c)).collect());
            at += n;
        }
        let t = Taxonomy::build(&base, &incs)?;
        *out = Box::into_raw(Box::new(FmwissTaxonomy(t)));
        Ok(())
    })
}

/// Number of steps including the base step; 0 for NULL.
///
/// # Safety
/// `tax` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_taxonomy_num_steps(tax: *const FmwissTaxonomy) -> usize {
    tax.as_ref().map_or(0, |t| t.0.num_steps())
}

/// # Safety
/// `tax` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_taxonomy_free(tax: *mut FmwissTaxonomy) {
    if !tax.is_null() {
        drop(Box::from_raw(tax));
    }
}

/// Load a student checkpoint trained up to `step` of `tax`, using the
/// default architecture.
///
/// # Safety
/// `tax` must be a live handle, `path` a NUL-terminated string, and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_model_load(
    tax: *const FmwissTaxonomy,
    step: usize,
    path: *const c_char,
    out: *mut *mut FmwissModel,
) -> i32 {
    guard(|| {
        non_null(tax, "tax")?;
        non_null(out, "out")?;
        let tax = &(*tax).0;
        let path = path_arg(path)?;
        let mut model = StudentModel::zeros(StudentConfig::default(), tax.output_classes(step)?);
        model.decode_into(&std::fs::read(&path).map_err(Error::from)?, tax.digest())?;
        *out = Box::into_raw(Box::new(FmwissModel(model)));
        Ok(())
    })
}

/// Output channels of the model (background included); 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_model_num_classes(model: *const FmwissModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.classes.len())
}

/// Predict a class-id map for an interleaved RGB image of `height x width`
/// pixels. Writes `height * width` ids to `labels`.
///
/// # Safety
/// `rgb` must hold `3 * height * width` bytes and `labels` room for
/// `height * width` values.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_model_predict(
    model: *const FmwissModel,
    rgb: *const u8,
    height: usize,
    width: usize,
    labels: *mut u16,
) -> i32 {
    guard(|| {
        non_null(model, "model")?;
        non_null(labels, "labels")?;
        let n = height * width;
        let img = RgbImage::from_vec(height, width, slice(rgb, 3 * n, "rgb")?.to_vec())?;
        let pred = (*model).0.predict(&img)?;
        std::slice::from_raw_parts_mut(labels, n).copy_from_slice(&pred.data);
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_model_free(model: *mut FmwissModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Read a memory-bank file. The capacity is taken from the file contents.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_bank_read(path: *const c_char, out: *mut *mut FmwissBank) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let bank = MemoryBank::read(&path_arg(path)?, None)?;
        *out = Box::into_raw(Box::new(FmwissBank(bank)));
        Ok(())
    })
}

/// Crops stored for `class`, or 0 when the class has no archive.
///
/// # Safety
/// `bank` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_bank_class_crops(bank: *const FmwissBank, class_id: u16) -> usize {
    bank.as_ref().and_then(|b| b.0.archive(ClassId(class_id))).map_or(0, |a| a.len())
}

/// Total crops across all classes; 0 for NULL.
///
/// # Safety
/// `bank` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_bank_total_crops(bank: *const FmwissBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.total_crops())
}

/// # Safety
/// `bank` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_bank_free(bank: *mut FmwissBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Keep the top `k_percent` of a row-major score map: writes 1 for kept
/// pixels and 0 elsewhere. Ties go to the earlier pixel.
///
/// # Safety
/// `values` must hold `height * width` floats and `out` the same number of
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn fmwiss_binarize_topk(
    values: *const f32,
    height: usize,
    width: usize,
    k_percent: f64,
    out: *mut u8,
) -> i32 {
    guard(|| {
        non_null(out, "out")?;
        let n = height * width;
        let map = Plane::from_vec(height, width, slice(values, n, "values")?.to_vec())?;
        let bin = binarize_topk(&map, k_percent)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&bin.data);
        Ok(())
    })
}
