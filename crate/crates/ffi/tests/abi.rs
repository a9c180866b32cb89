use std::ffi::{CStr, CString};
use std::ptr;

use fmwiss::distill::{StudentConfig, StudentModel};
use fmwiss::memory_paste::{InstanceCrop, MemoryBank};
use fmwiss::tensor::{Plane, RgbImage};
use fmwiss::{ClassId, Error, Taxonomy};
use fmwiss_ffi::*;

fn last_error() -> String {
    let p = fmwiss_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn taxonomy() -> *mut FmwissTaxonomy {
    let base = [1u16, 2];
    let steps = [4u16];
    let lens = [1usize];
    let mut t = ptr::null_mut();
    assert_eq!(unsafe { fmwiss_taxonomy_new(base.as_ptr(), 2, steps.as_ptr(), lens.as_ptr(), 1, &mut t) }, FMWISS_OK);
    t
}

#[test]
fn taxonomy_lifecycle_and_errors() {
    let t = taxonomy();
    assert_eq!(unsafe { fmwiss_taxonomy_num_steps(t) }, 2);
    unsafe { fmwiss_taxonomy_free(t) };
    unsafe { fmwiss_taxonomy_free(ptr::null_mut()) };
    assert_eq!(unsafe { fmwiss_taxonomy_num_steps(ptr::null()) }, 0);

    let dup = [1u16, 1];
    let mut t = ptr::null_mut();
    let rc = unsafe { fmwiss_taxonomy_new(dup.as_ptr(), 2, ptr::null(), ptr::null(), 0, &mut t) };
    assert_eq!(rc, FMWISS_ERR_DUPLICATE_CLASS);
    assert!(t.is_null());
    assert!(last_error().contains("more than once"));

    let rc = unsafe { fmwiss_taxonomy_new(dup.as_ptr(), 1, ptr::null(), ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(rc, FMWISS_ERR_NULL);
}

#[test]
fn model_load_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let tax = Taxonomy::build(&[ClassId(1), ClassId(2)], &[vec![ClassId(4)]]).unwrap();
    let mut model = StudentModel::zeros(StudentConfig::default(), tax.output_classes(1).unwrap());
    // bias the amber channel so every pixel predicts class 4
    let last = model.head.bias.value.len() - 1;
    model.head.bias.value[last] = 3.0;
    let path = dir.path().join("m.fmws");
    std::fs::write(&path, model.encode(tax.digest())).unwrap();

    let t = taxonomy();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { fmwiss_model_load(t, 1, cpath.as_ptr(), &mut m) }, FMWISS_OK);
    assert_eq!(unsafe { fmwiss_model_num_classes(m) }, 4);
    let rgb = [50u8; 8 * 8 * 3];
    let mut labels = vec![0u16; 64];
    assert_eq!(unsafe { fmwiss_model_predict(m, rgb.as_ptr(), 8, 8, labels.as_mut_ptr()) }, FMWISS_OK);
    assert!(labels.iter().all(|&l| l == 4));
    // 6x6 is not a multiple of the patch size
    let rc = unsafe { fmwiss_model_predict(m, rgb.as_ptr(), 6, 6, labels.as_mut_ptr()) };
    assert_eq!(rc, FMWISS_ERR_SHAPE_MISMATCH);
    unsafe { fmwiss_model_free(m) };

    // wrong step: the checkpoint has four channels, step 0 expects three
    let mut m = ptr::null_mut();
    let rc = unsafe { fmwiss_model_load(t, 0, cpath.as_ptr(), &mut m) };
    assert_ne!(rc, FMWISS_OK);
    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fmwiss_model_load(t, 1, missing.as_ptr(), &mut m) }, FMWISS_ERR_IO);
    unsafe { fmwiss_taxonomy_free(t) };
}

#[test]
fn bank_read() {
    let dir = tempfile::tempdir().unwrap();
    let mut bank = MemoryBank::new([ClassId(1), ClassId(2)], 5).unwrap();
    let crop = InstanceCrop::new(ClassId(2), RgbImage::new(2, 3), Plane::filled(2, 3, 1)).unwrap();
    bank.insert(crop.clone()).unwrap();
    bank.insert(crop).unwrap();
    let path = dir.path().join("b.fmwb");
    bank.write(&path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { fmwiss_bank_read(cpath.as_ptr(), &mut b) }, FMWISS_OK);
    assert_eq!(unsafe { fmwiss_bank_total_crops(b) }, 2);
    assert_eq!(unsafe { fmwiss_bank_class_crops(b, 2) }, 2);
    assert_eq!(unsafe { fmwiss_bank_class_crops(b, 1) }, 0);
    assert_eq!(unsafe { fmwiss_bank_class_crops(b, 9) }, 0);
    unsafe { fmwiss_bank_free(b) };

    std::fs::write(&path, b"XXXX").unwrap();
    assert_eq!(unsafe { fmwiss_bank_read(cpath.as_ptr(), &mut b) }, FMWISS_ERR_FORMAT);
}

#[test]
fn binarize_matches_core() {
    let vals = [0.1f32, 0.9, 0.5, 0.5, 0.2, 0.7];
    let mut out = [9u8; 6];
    assert_eq!(unsafe { fmwiss_binarize_topk(vals.as_ptr(), 2, 3, 50.0, out.as_mut_ptr()) }, FMWISS_OK);
    assert_eq!(out, [0, 1, 1, 0, 0, 1]);
    assert_eq!(unsafe { fmwiss_binarize_topk(vals.as_ptr(), 2, 3, 0.0, out.as_mut_ptr()) }, FMWISS_ERR_BAD_PERCENTAGE);
}

#[test]
fn error_codes_mirror_core() {
    let pairs = [
        (FMWISS_ERR_DUPLICATE_CLASS, Error::DuplicateClass(ClassId(1)).code()),
        (FMWISS_ERR_EMPTY_STEP, Error::EmptyStep(0).code()),
        (FMWISS_ERR_STEP_OUT_OF_RANGE, Error::StepOutOfRange { step: 0, steps: 0 }.code()),
        (FMWISS_ERR_RESERVED_CLASS, Error::ReservedClass(ClassId(0)).code()),
        (FMWISS_ERR_ZERO_VECTOR, Error::ZeroVector(0, 0).code()),
        (FMWISS_ERR_EMPTY_CLASS_SET, Error::EmptyClassSet.code()),
        (FMWISS_ERR_DIM_MISMATCH, Error::DimMismatch { expected: 0, actual: 0 }.code()),
        (FMWISS_ERR_BAD_PERCENTAGE, Error::BadPercentage(0.0).code()),
        (FMWISS_ERR_UNKNOWN_CLASS, Error::UnknownClass(ClassId(1)).code()),
        (FMWISS_ERR_EMPTY_FOREGROUND, Error::EmptyForeground.code()),
        (FMWISS_ERR_SHAPE_MISMATCH, Error::ShapeMismatch(String::new()).code()),
        (FMWISS_ERR_BACKEND_FAILURE, Error::BackendFailure { endpoint: String::new(), message: String::new() }.code()),
        (FMWISS_ERR_NO_FOREGROUND, Error::NoForeground.code()),
        (FMWISS_ERR_BAD_TEMPERATURE, Error::BadTemperature(0.0).code()),
        (FMWISS_ERR_NOT_OLD_CLASS, Error::NotOldClass(ClassId(1)).code()),
        (FMWISS_ERR_EMPTY_BANK, Error::EmptyBank.code()),
        (FMWISS_ERR_NON_FINITE, Error::NonFinite(String::new()).code()),
        (FMWISS_ERR_MISSING_PSEUDO_LABELS, Error::MissingPseudoLabels(String::new()).code()),
        (FMWISS_ERR_ID_OUT_OF_RANGE, Error::IdOutOfRange(0).code()),
        (FMWISS_ERR_MISSING_PREREQUISITE, Error::MissingPrerequisite("x".into()).code()),
        (FMWISS_ERR_CONFIG, Error::Config(String::new()).code()),
        (FMWISS_ERR_FORMAT, Error::Format(String::new()).code()),
        (FMWISS_ERR_IO, Error::Io(std::io::Error::other("x")).code()),
    ];
    for (ffi, core) in pairs {
        assert_eq!(ffi, core);
        assert!(ffi > FMWISS_ERR_PANIC);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(fmwiss_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_compiles_as_c() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/fmwiss.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for sym in ["fmwiss_model_predict", "fmwiss_bank_read", "FMWISS_ERR_FORMAT", "typedef struct FmwissModel"] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-std=c99", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler; skipping syntax check");
        return;
    };
    assert!(status.success());
}
