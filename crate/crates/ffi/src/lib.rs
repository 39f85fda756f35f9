//! C ABI over the evaluation metrics and the stage runner.
//!
//! Every function returns a [`CgStatus`]; on failure the message is kept in
//! thread-local storage and read back with [`cg_last_error`]. Buffers are
//! borrowed for the duration of the call only. Handles are created by a
//! `*_new`/`*_open` function and released by the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cropgan::classify::{Averaging, ClassificationReport};
use cropgan::dataset::Label;
use cropgan::gen_metrics::{fid, fit_gaussian, inception_score, ClassProbMatrix};
use cropgan::mask::Mask;
use cropgan::pipeline::{self, RunOptions, Stage};
use cropgan::seg::{self, ApInterpolation, InstanceRecord};
use cropgan::Error;
use nalgebra::DMatrix;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Shape = 3,
    Numerical = 4,
    Io = 5,
    Config = 6,
    Dependency = 7,
    Panic = 8,
}

impl From<&Error> for CgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::NoImages(_) => CgStatus::InvalidInput,
            Error::Shape(_) => CgStatus::Shape,
            Error::Numerical(_) => CgStatus::Numerical,
            Error::Dependency(_) => CgStatus::Dependency,
            Error::Config(_) => CgStatus::Config,
            Error::Io { .. } | Error::Image(_) | Error::Json(_) => CgStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(CgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(CgStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CgStatus::NullPointer, format!("`{what}` is NULL"))
}

/// Runs `f`, records any error or panic and maps it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CgStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CgStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(CgStatus::InvalidInput, format!("`{what}` is not valid UTF-8")))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b).ok_or_else(|| Fail(CgStatus::Shape, "buffer size overflows".into()))
}

/// Message of the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fréchet distance between Gaussians fitted to two row-major feature
/// matrices of shape `n_real x dim` and `n_gen x dim`.
///
/// # Safety
/// `real` and `gen` must point to that many doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_fid(
    real: *const f64,
    n_real: usize,
    gen: *const f64,
    n_gen: usize,
    dim: usize,
    out_fid: *mut f64,
) -> CgStatus {
    guard(|| {
        let r = slice(real, checked_len(n_real, dim)?, "real")?;
        let g = slice(gen, checked_len(n_gen, dim)?, "gen")?;
        let o = out(out_fid, "out_fid")?;
        let fr = fit_gaussian(&DMatrix::from_row_slice(n_real, dim, r))?;
        let fg = fit_gaussian(&DMatrix::from_row_slice(n_gen, dim, g))?;
        *o = fid(&fr, &fg)?;
        Ok(())
    })
}

/// Inception score of a row-major `n x classes` probability matrix.
///
/// # Safety
/// `probs` must point to `n * classes` doubles; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_inception_score(
    probs: *const f64,
    n: usize,
    classes: usize,
    splits: usize,
    out_mean: *mut f64,
    out_std: *mut f64,
) -> CgStatus {
    guard(|| {
        let p = slice(probs, checked_len(n, classes)?, "probs")?;
        let (m, s) = (out(out_mean, "out_mean")?, out(out_std, "out_std")?);
        (*m, *s) = inception_score(&ClassProbMatrix::new(n, classes, p.to_vec())?, splits)?;
        Ok(())
    })
}

/// Summary of a classifier evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CgClassMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub log_loss: f64,
}

/// Macro-averaged metrics of `probs` (row-major `n x classes`) against
/// integer `labels`.
///
/// # Safety
/// Buffers must hold `n * classes` doubles and `n` labels.
#[no_mangle]
pub unsafe extern "C" fn cg_classification_metrics(
    probs: *const f64,
    labels: *const u32,
    n: usize,
    classes: usize,
    out_metrics: *mut CgClassMetrics,
) -> CgStatus {
    guard(|| {
        let p = slice(probs, checked_len(n, classes)?, "probs")?;
        let l: Vec<usize> = slice(labels, n, "labels")?.iter().map(|&x| x as usize).collect();
        let o = out(out_metrics, "out_metrics")?;
        let names: Vec<String> = (0..classes).map(|k| k.to_string()).collect();
        let m = ClassProbMatrix::new(n, classes, p.to_vec())?;
        let r = ClassificationReport::evaluate("ffi", &m, &l, &names, Averaging::Macro)?;
        *o = CgClassMetrics { accuracy: r.accuracy, precision: r.precision, recall: r.recall, f1: r.f1, log_loss: r.log_loss };
        Ok(())
    })
}

unsafe fn mask(bits: *const u8, height: usize, width: usize, what: &str) -> Result<Mask, Fail> {
    let b = slice(bits, checked_len(height, width)?, what)?;
    Ok(Mask::from_bits(height, width, b.iter().map(|&v| v != 0).collect())?)
}

/// IoU and Dice of two row-major `height x width` masks (non-zero is set).
///
/// # Safety
/// Both masks must hold `height * width` bytes; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_mask_overlap(
    a: *const u8,
    b: *const u8,
    height: usize,
    width: usize,
    out_iou: *mut f64,
    out_dice: *mut f64,
) -> CgStatus {
    guard(|| {
        let (ma, mb) = (mask(a, height, width, "a")?, mask(b, height, width, "b")?);
        let (i, d) = (out(out_iou, "out_iou")?, out(out_dice, "out_dice")?);
        *i = seg::mask_iou(&ma, &mb)?;
        *d = seg::dice(&ma, &mb)?;
        Ok(())
    })
}

/// Accumulates ground-truth and predicted instances, then scores them.
pub struct CgSegEvaluator {
    gts: Vec<InstanceRecord>,
    preds: Vec<InstanceRecord>,
}

/// Segmentation scores; AP values are averaged over the COCO thresholds.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CgSegMetrics {
    pub mask_ap: f64,
    pub mask_ap50: f64,
    pub mask_ap75: f64,
    pub bbox_ap: f64,
    pub bbox_ap50: f64,
    pub dice: f64,
}

#[no_mangle]
pub extern "C" fn cg_seg_evaluator_new() -> *mut CgSegEvaluator {
    Box::into_raw(Box::new(CgSegEvaluator { gts: Vec::new(), preds: Vec::new() }))
}

/// # Safety
/// `h` must come from [`cg_seg_evaluator_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cg_seg_evaluator_free(h: *mut CgSegEvaluator) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

unsafe fn add_instance(
    h: *mut CgSegEvaluator,
    image_id: *const c_char,
    class_id: u32,
    bits: *const u8,
    height: usize,
    width: usize,
    score: f64,
    gt: bool,
) -> CgStatus {
    guard(|| {
        let e = out(h, "evaluator")?;
        let id = string(image_id, "image_id")?;
        let label = Label::from_coco_id(u64::from(class_id))
            .ok_or_else(|| Fail(CgStatus::InvalidInput, format!("unknown class id {class_id}")))?;
        let rec = InstanceRecord::new(id, label, mask(bits, height, width, "mask")?, score)?;
        if gt {
            e.gts.push(rec);
        } else {
            e.preds.push(rec);
        }
        Ok(())
    })
}

/// Adds a ground-truth instance. `class_id` is the COCO category id.
///
/// # Safety
/// `h` must be a live evaluator, `image_id` a NUL-terminated string and
/// `mask` hold `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn cg_seg_evaluator_add_ground_truth(
    h: *mut CgSegEvaluator,
    image_id: *const c_char,
    class_id: u32,
    mask: *const u8,
    height: usize,
    width: usize,
) -> CgStatus {
    add_instance(h, image_id, class_id, mask, height, width, 1.0, true)
}

/// Adds a scored prediction.
///
/// # Safety
/// As for [`cg_seg_evaluator_add_ground_truth`].
#[no_mangle]
pub unsafe extern "C" fn cg_seg_evaluator_add_prediction(
    h: *mut CgSegEvaluator,
    image_id: *const c_char,
    class_id: u32,
    mask: *const u8,
    height: usize,
    width: usize,
    score: f64,
) -> CgStatus {
    add_instance(h, image_id, class_id, mask, height, width, score, false)
}

/// # Safety
/// `h` must be a live evaluator and `out_metrics` writable.
#[no_mangle]
pub unsafe extern "C" fn cg_seg_evaluator_compute(h: *const CgSegEvaluator, out_metrics: *mut CgSegMetrics) -> CgStatus {
    guard(|| {
        let e = h.as_ref().ok_or_else(|| null("evaluator"))?;
        let o = out(out_metrics, "out_metrics")?;
        let r = seg::evaluate("ffi", &e.preds, &e.gts, ApInterpolation::Coco101)?;
        *o = CgSegMetrics {
            mask_ap: r.segm.ap,
            mask_ap50: r.segm.ap50,
            mask_ap75: r.segm.ap75,
            bbox_ap: r.bbox.ap,
            bbox_ap50: r.bbox.ap50,
            dice: r.dice,
        };
        Ok(())
    })
}

/// An opened pipeline run.
pub struct CgRun {
    ctx: pipeline::RunContext,
}

/// Opens the run described by a config file. On failure `*out_run` is set
/// to NULL.
///
/// # Safety
/// `config_path` must be NUL-terminated; `out_run` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cg_run_open(config_path: *const c_char, out_run: *mut *mut CgRun) -> CgStatus {
    guard(|| {
        let o = out(out_run, "out_run")?;
        *o = ptr::null_mut();
        let path = string(config_path, "config_path")?;
        let ctx = pipeline::open_run(Path::new(&path), &RunOptions::default())?;
        *o = Box::into_raw(Box::new(CgRun { ctx }));
        Ok(())
    })
}

/// # Safety
/// `run` must come from [`cg_run_open`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cg_run_free(run: *mut CgRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Runs one stage by name (`"preprocess"`, `"eval-seg"`, ...). Sets
/// `*out_ran` to 1 if the stage executed and 0 if it was up to date.
///
/// # Safety
/// `run` must be live, `stage` NUL-terminated; `out_ran` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn cg_run_stage(run: *const CgRun, stage: *const c_char, force: bool, out_ran: *mut i32) -> CgStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let s: Stage = string(stage, "stage")?.parse()?;
        let outcome = pipeline::run_stage(&r.ctx, s, force)?;
        if let Some(o) = out_ran.as_mut() {
            *o = i32::from(outcome == pipeline::Outcome::Ran);
        }
        Ok(())
    })
}

/// Copies the run directory path into `buf` (NUL-terminated) and stores
/// the full length excluding the NUL in `*out_len`. Truncation is not an
/// error; compare `*out_len` with `cap`.
///
/// # Safety
/// `buf` must hold `cap` bytes (or be NULL with `cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn cg_run_dir(run: *const CgRun, buf: *mut c_char, cap: usize, out_len: *mut usize) -> CgStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        let s = r.ctx.run_dir.to_string_lossy();
        let bytes = s.as_bytes();
        if let Some(l) = out_len.as_mut() {
            *l = bytes.len();
        }
        if cap > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        Ok(())
    })
}
