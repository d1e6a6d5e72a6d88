//! C ABI over the core library.
//!
//! Every function returns a [`BmnStatus`]. On failure the message is kept
//! per thread and can be read with [`bmn_last_error_message`]. Handles are
//! opaque and must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bmn::autodiff::Matrix;
use bmn::checkpoint::Checkpoint;
use bmn::data::{Dataset, Modality};
use bmn::loss::{batch_moments, kl_diag};
use bmn::model::ModelParams;
use bmn::target::{TargetGaussian, TargetSpec};
use bmn::{eval, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BmnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    Numeric = 6,
    Panic = 7,
}

/// Loaded checkpoint: parameters plus target configuration.
pub struct BmnModel {
    params: ModelParams,
    target: TargetSpec,
}

pub struct BmnDataset {
    inner: Dataset,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(err: &Error) -> BmnStatus {
    match err {
        Error::Io { .. } => BmnStatus::Io,
        Error::Format { .. } | Error::UnsupportedVersion { .. } | Error::Corrupt(_) | Error::Parse { .. } => {
            BmnStatus::Format
        }
        Error::Shape { .. } => BmnStatus::Shape,
        Error::NonFinite { .. } | Error::Domain { .. } | Error::NotPositiveDefinite { .. } | Error::NonFiniteLoss { .. } => {
            BmnStatus::Numeric
        }
        _ => BmnStatus::InvalidArgument,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> BmnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            BmnStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is a null pointer"));
            BmnStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            BmnStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            BmnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_ref<'a>(m: *const BmnModel) -> Result<&'a BmnModel, Failure> {
    m.as_ref().ok_or(Failure::Null("model"))
}

/// Last error message on this thread, or null. Valid until the next call
/// into this library from the same thread.
#[no_mangle]
pub extern "C" fn bmn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bmn_model_load(path: *const c_char, out: *mut *mut BmnModel) -> BmnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let ck = Checkpoint::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BmnModel {
            params: ck.params,
            target: ck.target,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`bmn_model_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bmn_model_free(model: *mut BmnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Writes the number of input features per item.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmn_model_input_dim(model: *const BmnModel, out: *mut usize) -> BmnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = m.params.config.input_dim;
        Ok(())
    })
}

/// Writes the latent dimensionality.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmn_model_latent_dim(model: *const BmnModel, out: *mut usize) -> BmnStatus {
    guard(|| {
        let m = model_ref(model)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = m.params.config.p;
        Ok(())
    })
}

/// Single-orientation latent point of a vector-modality pair.
///
/// # Safety
/// `x1`, `x2` must hold `len` values; `z` must hold `z_len` values.
#[no_mangle]
pub unsafe extern "C" fn bmn_latent(
    model: *const BmnModel,
    x1: *const f64,
    x2: *const f64,
    len: usize,
    z: *mut f64,
    z_len: usize,
) -> BmnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let a = Matrix::row_vector(slice_arg(x1, len, "x1")?.to_vec());
        let b = Matrix::row_vector(slice_arg(x2, len, "x2")?.to_vec());
        let out = m.params.latent(&a, &b)?;
        write_out(z, z_len, out.data())
    })
}

unsafe fn write_out(dst: *mut f64, len: usize, values: &[f64]) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(Failure::Null("output buffer"));
    }
    if len != values.len() {
        return Err(Failure::Invalid(format!(
            "output buffer holds {len} values, {} required",
            values.len()
        )));
    }
    std::slice::from_raw_parts_mut(dst, len).copy_from_slice(values);
    Ok(())
}

/// Result of one verification.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BmnVerification {
    /// 1 for matching, 0 for non-matching.
    pub matching: i32,
    pub margin: f64,
}

/// Flip-aggregated verification of a vector-modality pair. `z_bar` may be
/// null; otherwise it receives `z_bar_len` (= latent dim) values.
///
/// # Safety
/// `x1`, `x2` must hold `len` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmn_verify(
    model: *const BmnModel,
    x1: *const f64,
    x2: *const f64,
    len: usize,
    out: *mut BmnVerification,
    z_bar: *mut f64,
    z_bar_len: usize,
) -> BmnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let a = slice_arg(x1, len, "x1")?;
        let b = slice_arg(x2, len, "x2")?;
        let v = eval::verify(&m.params, &m.target, Modality::Vector, a, b)?;
        finish_verification(v, out, z_bar, z_bar_len)
    })
}

unsafe fn finish_verification(
    v: eval::Verification,
    out: *mut BmnVerification,
    z_bar: *mut f64,
    z_bar_len: usize,
) -> Result<(), Failure> {
    let out = out.as_mut().ok_or(Failure::Null("out"))?;
    if !z_bar.is_null() {
        write_out(z_bar, z_bar_len, &v.aggregated.z_bar)?;
    }
    *out = BmnVerification {
        matching: v.label.is_matching() as i32,
        margin: v.margin,
    };
    Ok(())
}

/// Loads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn bmn_dataset_load(path: *const c_char, out: *mut *mut BmnDataset) -> BmnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        *out = ptr::null_mut();
        let inner = Dataset::read(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(BmnDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must come from [`bmn_dataset_load`] and not be freed twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn bmn_dataset_free(dataset: *mut BmnDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmn_dataset_len(dataset: *const BmnDataset, out: *mut usize) -> BmnStatus {
    guard(|| {
        let d = dataset.as_ref().ok_or(Failure::Null("dataset"))?;
        *out.as_mut().ok_or(Failure::Null("out"))? = d.inner.len();
        Ok(())
    })
}

/// Verifies dataset items `a` and `b`, flipping per the dataset's modality.
///
/// # Safety
/// Handles and `out` must be valid; `z_bar` as in [`bmn_verify`].
#[no_mangle]
pub unsafe extern "C" fn bmn_verify_items(
    model: *const BmnModel,
    dataset: *const BmnDataset,
    a: usize,
    b: usize,
    out: *mut BmnVerification,
    z_bar: *mut f64,
    z_bar_len: usize,
) -> BmnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let d = dataset.as_ref().ok_or(Failure::Null("dataset"))?;
        let v = eval::verify_items(&m.params, &m.target, &d.inner, a, b)?;
        finish_verification(v, out, z_bar, z_bar_len)
    })
}

/// Diagonal-covariance KL of a row-major `rows x cols` batch against
/// `N(mu 1, sigma^2 I)`.
///
/// # Safety
/// `z` must hold `rows * cols` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn bmn_kl_batch(
    z: *const f64,
    rows: usize,
    cols: usize,
    mu: f64,
    sigma: f64,
    out: *mut f64,
) -> BmnStatus {
    guard(|| {
        let values = slice_arg(z, rows.saturating_mul(cols), "z")?;
        if !(sigma > 0.0 && sigma.is_finite() && mu.is_finite()) {
            return Err(Failure::Invalid(format!("need finite mu and sigma > 0, got {mu}, {sigma}")));
        }
        let batch = Matrix::new(rows, cols, values.to_vec())?;
        let kl = kl_diag(&batch_moments(&batch)?, TargetGaussian { mu, sigma, p: cols })?;
        *out.as_mut().ok_or(Failure::Null("out"))? = kl;
        Ok(())
    })
}
