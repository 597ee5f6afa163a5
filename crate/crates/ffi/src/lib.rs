//! C interface to mvgen.
//!
//! Every fallible call returns an `MvgenStatus`; on failure the message is
//! kept per thread and read with `mvgen_last_error`. Handles are opaque and
//! released with their `_free` function. Images cross the boundary as
//! `f32` in `[-1, 1]`, laid out `N x 3 x H x W`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mvgen::dataset::{generate_dataset, Dataset, DatasetConfig};
use mvgen::evaluation;
use mvgen::train::{self, ModelBundle, ModelKind, TrainConfig};
use mvgen::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvgenStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Io = 5,
    Format = 6,
    Exists = 7,
    Classifier = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Synthetic multi-view dataset.
pub struct MvgenDataset(Dataset);

/// Trained or freshly initialized model bundle.
pub struct MvgenModel(ModelBundle);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MvgenStatus {
    match e {
        Error::Shape(_) | Error::NonScalarLoss(_) => MvgenStatus::Shape,
        Error::Invalid(_) | Error::BatchTooSmall(_) => MvgenStatus::InvalidArgument,
        Error::NonFinite(_) => MvgenStatus::NonFinite,
        Error::Format(_) | Error::Json(_) => MvgenStatus::Format,
        Error::Exists { .. } => MvgenStatus::Exists,
        Error::ClassifierBelowThreshold { .. } => MvgenStatus::Classifier,
        Error::Io { .. } => MvgenStatus::Io,
    }
}

struct Fail(MvgenStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MvgenStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvgenStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MvgenStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MvgenStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn as_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(MvgenStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn slice_arg<'a>(p: *const f32, len: usize, what: &str) -> Result<&'a [f32], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out(src: &[f32], out: *mut f32, out_len: usize) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    if out_len < src.len() {
        return Err(Fail(MvgenStatus::BufferTooSmall, format!("output needs {} floats, got {out_len}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvgen_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (truncated and
/// NUL-terminated). Returns the full message length, 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mvgen_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len - 1);
                ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n) = 0;
            }
            bytes.len()
        }
    })
}

/// Render a dataset.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn mvgen_dataset_generate(
    train_objects: usize,
    train_views: usize,
    test_objects: usize,
    test_views: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut MvgenDataset,
) -> MvgenStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = DatasetConfig { train_objects, train_views, test_objects, test_views, image_size, seed };
        store(out, MvgenDataset(generate_dataset(&cfg)?))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mvgen_dataset_read(path: *const c_char, out: *mut *mut MvgenDataset) -> MvgenStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, MvgenDataset(Dataset::read(&path)?))
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvgen_dataset_write(ds: *const MvgenDataset, path: *const c_char) -> MvgenStatus {
    guard(|| Ok(as_ref(ds, "ds")?.0.write(&path_arg(path, "path")?)?))
}

/// Number of images, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_dataset_len(ds: *const MvgenDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_dataset_image_size(ds: *const MvgenDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.image_size())
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvgen_dataset_free(ds: *mut MvgenDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Fresh model with default hyperparameters for `kind` ("gmv", "cgmv",
/// "cgan", "dcganx2", "dcganx4", "dcganx8") at the given image size.
///
/// # Safety
/// `kind` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_init(
    kind: *const c_char,
    image_size: usize,
    seed: u64,
    out: *mut *mut MvgenModel,
) -> MvgenStatus {
    guard(|| {
        let kind: ModelKind = str_arg(kind, "kind")?.parse()?;
        let mut cfg = TrainConfig::new(kind);
        cfg.seed = seed;
        cfg.arch.image_size = image_size;
        cfg.validate()?;
        store(out, MvgenModel(ModelBundle::init(&cfg)?))
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_load(dir: *const c_char, out: *mut *mut MvgenModel) -> MvgenStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        store(out, MvgenModel(ModelBundle::load(&dir)?))
    })
}

/// # Safety
/// `m` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_save(m: *const MvgenModel, dir: *const c_char) -> MvgenStatus {
    guard(|| Ok(as_ref(m, "model")?.0.save(&path_arg(dir, "dir")?)?))
}

/// Train in memory until the model has taken `steps` iterations in total.
///
/// # Safety
/// `m` and `ds` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_train(m: *mut MvgenModel, ds: *const MvgenDataset, steps: u64) -> MvgenStatus {
    guard(|| {
        let m = m.as_mut().ok_or_else(|| null("model"))?;
        let ds = as_ref(ds, "ds")?;
        let mut bundle = m.0.clone();
        bundle.config.steps = steps;
        m.0 = train::train(bundle, &ds.0, None, |_, _| Ok(()))?;
        Ok(())
    })
}

/// Completed training iterations.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_step(m: *const MvgenModel) -> u64 {
    m.as_ref().map_or(0, |m| m.0.step())
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_content_dim(m: *const MvgenModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.config.arch.content_dim)
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_view_dim(m: *const MvgenModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.config.arch.view_dim)
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_image_size(m: *const MvgenModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.config.arch.image_size)
}

/// Images generated per latent: K for joint-view generators, else 1.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_heads(m: *const MvgenModel) -> usize {
    m.as_ref().map_or(0, |m| m.0.kind().joint_views().unwrap_or(1))
}

/// Eval-mode generation from `n` content codes (`n x content_dim`) and view
/// codes (`n x view_dim`). Writes `heads x n x 3 x H x W` floats to `out`.
///
/// # Safety
/// The input pointers must cover the sizes above and `out` must hold
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_generate(
    m: *const MvgenModel,
    content: *const f32,
    view: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> MvgenStatus {
    guard(|| {
        let b = &as_ref(m, "model")?.0;
        let (cd, vd) = (b.config.arch.content_dim, b.config.arch.view_dim);
        let c = Tensor::new(&[n, cd], slice_arg(content, n * cd, "content")?.to_vec())?;
        let v = Tensor::new(&[n, vd], slice_arg(view, n * vd, "view")?.to_vec())?;
        let images: Vec<f32> = b.generate(&c, &v)?.iter().flat_map(|t| t.data().iter().copied()).collect();
        write_out(&images, out, out_len)
    })
}

/// Content codes (`n x content_dim`) of `n` images; conditional models only.
///
/// # Safety
/// `images` must hold `n x 3 x H x W` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_encode(
    m: *const MvgenModel,
    images: *const f32,
    n: usize,
    out: *mut f32,
    out_len: usize,
) -> MvgenStatus {
    guard(|| {
        let b = &as_ref(m, "model")?.0;
        let h = b.config.arch.image_size;
        let x = Tensor::new(&[n, 3, h, h], slice_arg(images, n * 3 * h * h, "images")?.to_vec())?;
        write_out(b.encode(&x)?.data(), out, out_len)
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvgen_model_free(m: *mut MvgenModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Probability that a positive distance is below a negative one, ties
/// counting one half.
///
/// # Safety
/// `pos` and `neg` must hold `n_pos` and `n_neg` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mvgen_auc_lower_distance(
    pos: *const f64,
    n_pos: usize,
    neg: *const f64,
    n_neg: usize,
    out: *mut f64,
) -> MvgenStatus {
    guard(|| {
        if pos.is_null() || neg.is_null() || out.is_null() {
            return Err(null("pos/neg/out"));
        }
        let (p, q) = (std::slice::from_raw_parts(pos, n_pos), std::slice::from_raw_parts(neg, n_neg));
        *out = evaluation::auc_lower_distance(p, q)?;
        Ok(())
    })
}

/// Run the gradient-check suite; writes the worst relative error.
///
/// # Safety
/// `worst` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mvgen_gradcheck(worst: *mut f64) -> MvgenStatus {
    guard(|| {
        if worst.is_null() {
            return Err(null("worst"));
        }
        let results = mvgen::verify::gradcheck_suite()?;
        *worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
        Ok(())
    })
}
