//! C interface to the segmentation model.
//!
//! Models live behind opaque `DtuModel` handles created by [`dtu_model_new`] or
//! [`dtu_model_load`] and released with [`dtu_model_free`]. Fallible calls return
//! a [`DtuStatus`]; after a failure, [`dtu_last_error`] describes it on the same
//! thread. Buffers are owned by the caller and passed with explicit lengths.
//! A handle must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use datransunet::error::Error;
use datransunet::metrics::{confusion_counts, decide, hausdorff, iou_and_dice, LabelMap};
use datransunet::model::{DaTransUnet, ModelConfig};
use datransunet::nn::{ForwardCtx, Module};
use datransunet::tensor::{no_grad, Scalar, Tensor, TensorError};
use datransunet::train::{load_checkpoint, read_header};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtuStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Data = 4,
    Incompatible = 5,
    NonFinite = 6,
    Io = 7,
    Panic = 8,
}

pub const DTU_DTYPE_F32: u32 = 0;
pub const DTU_DTYPE_F64: u32 = 1;

enum Inner {
    F32(DaTransUnet<f32>),
    F64(DaTransUnet<f64>),
}

/// Opaque model handle.
pub struct DtuModel {
    inner: Inner,
}

impl DtuModel {
    fn config(&self) -> &ModelConfig {
        match &self.inner {
            Inner::F32(m) => m.config(),
            Inner::F64(m) => m.config(),
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DtuModelInfo {
    pub in_channels: usize,
    /// Head channels; 1 means a binary (sigmoid) head.
    pub num_classes: usize,
    pub input_size: usize,
    pub parameters: usize,
    /// `DTU_DTYPE_F32` or `DTU_DTYPE_F64`.
    pub dtype: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DtuMaskMetrics {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub iou: f64,
    pub dice: f64,
    pub hd: f64,
    pub hd95: f64,
    /// Exactly one mask was empty; `hd` and `hd95` hold the image diagonal.
    pub hd_sentinel: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DtuStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) => DtuStatus::Config,
            Error::Data(_) | Error::Image { .. } | Error::Serialize(_) => DtuStatus::Data,
            Error::Incompatible { .. } => DtuStatus::Incompatible,
            Error::NonFiniteLoss { .. } | Error::Tensor(TensorError::NonFinite { .. }) => DtuStatus::NonFinite,
            Error::Tensor(_) => DtuStatus::InvalidArgument,
            Error::Io { .. } => DtuStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Error::from(e).into()
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(DtuStatus::InvalidArgument, message.into())
}

fn null(what: &str) -> Failure {
    Failure(DtuStatus::NullPointer, format!("{what} is null"))
}

fn set_last_error(message: Option<String>) {
    let c = message.map(|m| CString::new(m.replace('\0', " ")).expect("interior nul removed"));
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

/// Runs `f`, recording its failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DtuStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(None);
            DtuStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_last_error(Some(message));
            status
        }
        Err(_) => {
            set_last_error(Some("internal panic".into()));
            DtuStatus::Panic
        }
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller passes a nul-terminated string that outlives this call.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `len` readable elements at `p`.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: the caller guarantees `len` writable elements at `p`, not aliased elsewhere.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

unsafe fn handle<'a>(model: *const DtuModel) -> Result<&'a DtuModel, Failure> {
    // SAFETY: non-null handles come from `Box::into_raw` in this crate and are live until freed.
    unsafe { model.as_ref() }.ok_or_else(|| null("model"))
}

fn store(out: *mut *mut DtuModel, inner: Inner) -> Result<(), Failure> {
    // SAFETY: `out` was checked for null by the caller of this helper.
    unsafe { *out = Box::into_raw(Box::new(DtuModel { inner })) };
    Ok(())
}

/// Builds a freshly initialized model.
///
/// `config_toml` holds model settings as flat TOML keys (for example
/// `input_size = 64`); missing keys take their defaults and null means all
/// defaults. `dtype` is `DTU_DTYPE_F32` or `DTU_DTYPE_F64`. On success `*out`
/// receives a handle to release with [`dtu_model_free`].
///
/// # Safety
///
/// `config_toml` must be null or a nul-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtu_model_new(config_toml: *const c_char, dtype: u32, out: *mut *mut DtuModel) -> DtuStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: ModelConfig = if config_toml.is_null() {
            ModelConfig::default()
        } else {
            // SAFETY: forwarded caller contract.
            let text = unsafe { c_str(config_toml, "config_toml") }?;
            toml::from_str(text).map_err(|e| Failure(DtuStatus::Config, e.to_string()))?
        };
        let inner = match dtype {
            DTU_DTYPE_F32 => Inner::F32(DaTransUnet::new(&cfg)?),
            DTU_DTYPE_F64 => Inner::F64(DaTransUnet::new(&cfg)?),
            other => return Err(invalid(format!("unknown dtype {other}"))),
        };
        store(out, inner)
    })
}

/// Loads the model stored in a checkpoint directory, in the precision it was saved with.
///
/// # Safety
///
/// `checkpoint_dir` must be a nul-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtu_model_load(checkpoint_dir: *const c_char, out: *mut *mut DtuModel) -> DtuStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: forwarded caller contract.
        let dir = Path::new(unsafe { c_str(checkpoint_dir, "checkpoint_dir") }?);
        let inner = match read_header(dir)?.dtype.as_str() {
            "f64" => Inner::F64(load_checkpoint::<f64>(dir, None)?.model),
            _ => Inner::F32(load_checkpoint::<f32>(dir, None)?.model),
        };
        store(out, inner)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
///
/// `model` must be null or a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn dtu_model_free(model: *mut DtuModel) {
    if !model.is_null() {
        // SAFETY: the handle was created by `Box::into_raw` and is freed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Input geometry, head width and parameter count of a model.
///
/// # Safety
///
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtu_model_info(model: *const DtuModel, out: *mut DtuModelInfo) -> DtuStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let m = unsafe { handle(model) }?;
        // SAFETY: forwarded caller contract.
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let cfg = m.config();
        let (parameters, dtype) = match &m.inner {
            Inner::F32(net) => (net.num_parameters(), DTU_DTYPE_F32),
            Inner::F64(net) => (net.num_parameters(), DTU_DTYPE_F64),
        };
        *out = DtuModelInfo {
            in_channels: cfg.in_channels,
            num_classes: cfg.num_classes,
            input_size: cfg.input_size,
            parameters,
            dtype,
        };
        Ok(())
    })
}

fn forward<F: Scalar>(net: &DaTransUnet<F>, images: &[f32], batch: usize) -> Result<Tensor<F>, Failure> {
    let cfg = net.config();
    let s = cfg.input_size;
    let expected = batch * cfg.in_channels * s * s;
    if batch == 0 || images.len() != expected {
        return Err(invalid(format!(
            "expected {expected} input values for a batch of {batch} ({} x {s} x {s} each), got {}",
            cfg.in_channels,
            images.len()
        )));
    }
    let x = Tensor::from_vec(&[batch, cfg.in_channels, s, s], images.iter().map(|&v| F::lit(v as f64)).collect())?;
    Ok(no_grad(|| net.forward(&x, &mut ForwardCtx::eval()))?)
}

/// Eval-mode logits for `batch` images laid out `(batch, in_channels, size, size)`.
/// `logits` receives `(batch, num_classes, size, size)` values.
///
/// # Safety
///
/// `model` must be a live handle; `images` and `logits` must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dtu_model_forward(
    model: *const DtuModel,
    images: *const f32,
    images_len: usize,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> DtuStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (m, input, output) =
            unsafe { (handle(model)?, slice(images, images_len, "images")?, slice_mut(logits, logits_len, "logits")?) };
        let values: Vec<f32> = match &m.inner {
            Inner::F32(net) => forward(net, input, batch)?.data().to_vec(),
            Inner::F64(net) => forward(net, input, batch)?.data().iter().map(|v| *v as f32).collect(),
        };
        if values.len() != output.len() {
            return Err(invalid(format!("logits buffer holds {}, output has {}", output.len(), values.len())));
        }
        output.copy_from_slice(&values);
        Ok(())
    })
}

/// Eval-mode class labels, `(batch, size, size)` values.
///
/// # Safety
///
/// `model` must be a live handle; `images` and `labels` must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dtu_model_predict(
    model: *const DtuModel,
    images: *const f32,
    images_len: usize,
    batch: usize,
    labels: *mut u8,
    labels_len: usize,
) -> DtuStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let (m, input, output) =
            unsafe { (handle(model)?, slice(images, images_len, "images")?, slice_mut(labels, labels_len, "labels")?) };
        let maps = match &m.inner {
            Inner::F32(net) => decide(&forward(net, input, batch)?)?,
            Inner::F64(net) => decide(&forward(net, input, batch)?)?,
        };
        let values: Vec<u8> = maps.into_iter().flat_map(|m| m.labels).collect();
        if values.len() != output.len() {
            return Err(invalid(format!("labels buffer holds {}, prediction has {}", output.len(), values.len())));
        }
        output.copy_from_slice(&values);
        Ok(())
    })
}

/// Overlap and boundary-distance metrics of class `class_id` between two `height x width` label maps.
///
/// # Safety
///
/// `pred` and `truth` must each hold `height * width` bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dtu_mask_metrics(
    pred: *const u8,
    truth: *const u8,
    height: usize,
    width: usize,
    class_id: u8,
    out: *mut DtuMaskMetrics,
) -> DtuStatus {
    guard(|| {
        let n = height.checked_mul(width).ok_or_else(|| invalid("height * width overflows"))?;
        // SAFETY: forwarded caller contract.
        let (p, t, out) =
            unsafe { (slice(pred, n, "pred")?, slice(truth, n, "truth")?, out.as_mut().ok_or_else(|| null("out"))?) };
        let p = LabelMap::new(height, width, p.to_vec())?;
        let t = LabelMap::new(height, width, t.to_vec())?;
        let counts = confusion_counts(&p, &t, class_id)?;
        let (iou, dice) = iou_and_dice(counts);
        let hd = hausdorff(&p.mask(class_id), &t.mask(class_id))?;
        *out = DtuMaskMetrics {
            true_pos: counts.true_pos,
            false_pos: counts.false_pos,
            false_neg: counts.false_neg,
            iou,
            dice,
            hd: hd.max,
            hd95: hd.p95,
            hd_sentinel: hd.sentinel,
        };
        Ok(())
    })
}

/// Message for the most recent failure on this thread, or null after a success.
/// The pointer stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dtu_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn dtu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
