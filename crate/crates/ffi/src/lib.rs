//! C ABI for loading trained checkpoints and running inference.
//!
//! Every function is panic-safe (panics are caught and reported as
//! [`MdnetStatus::Runtime`]), every failure leaves a human-readable
//! message retrievable with [`mdnet_last_error`], and the numeric status
//! codes match the command-line tool's exit codes: 0 success, 1 usage
//! (bad arguments or malformed files), 2 runtime failure.
//!
//! Models are opaque handles created by [`mdnet_load`] and released by
//! [`mdnet_free`]. A handle is immutable after loading and may be shared
//! across threads for concurrent evaluation.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mdnet_core::error::MdError;
use mdnet_core::io::Checkpoint;
use mdnet_core::network::{fuse_checkpoint, unfuse_checkpoint, MultiDomainNet};
use mdnet_core::tensor::{Dtype, Scalar, Tensor};
use mdnet_core::trainer::network_from_checkpoint;

/// Status of an FFI call. Matches the CLI's exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum MdnetStatus {
    /// The call succeeded.
    Ok = 0,
    /// The caller's fault: null or mismatched arguments, unknown domain,
    /// malformed file.
    Usage = 1,
    /// A runtime failure: I/O, numeric trouble, or an internal panic.
    Runtime = 2,
}

enum ModelImpl {
    Single(MultiDomainNet<f32>),
    Double(MultiDomainNet<f64>),
}

/// An immutable loaded network. Create with [`mdnet_load`], destroy with
/// [`mdnet_free`].
pub struct MdnetModel {
    inner: ModelImpl,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &MdError) -> MdnetStatus {
    if e.is_usage() {
        MdnetStatus::Usage
    } else {
        MdnetStatus::Runtime
    }
}

/// Wraps an FFI body: catches panics, routes errors into the thread-local
/// message slot, and maps everything onto a status code.
fn guarded(body: impl FnOnce() -> Result<(), (MdnetStatus, String)>) -> MdnetStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MdnetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MdnetStatus::Runtime
        }
    }
}

fn usage(msg: impl Into<String>) -> (MdnetStatus, String) {
    (MdnetStatus::Usage, msg.into())
}

fn from_md(e: MdError) -> (MdnetStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn cstr_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MdnetStatus, String)> {
    if p.is_null() {
        return Err(usage(format!("{what} is null")));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| usage(format!("{what} is not valid UTF-8")))
}

/// Message describing the most recent failure on this thread, or null if
/// the last call succeeded. The pointer stays valid until the next mdnet
/// call on the same thread.
#[no_mangle]
pub extern "C" fn mdnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mdnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

fn load_model(path: &str) -> Result<MdnetModel, (MdnetStatus, String)> {
    let bytes = std::fs::read(Path::new(path))
        .map_err(|e| (MdnetStatus::Runtime, format!("{path}: {e}")))?;
    let ck = Checkpoint::decode(&bytes, path).map_err(from_md)?;
    let dtype = ck
        .get("universal/layer/0/filter")
        .map(|r| r.dtype())
        .ok_or_else(|| usage(format!("{path}: not a network checkpoint")))?;
    let inner = match dtype {
        Dtype::Double => ModelImpl::Double(network_from_checkpoint::<f64>(&ck).map_err(from_md)?.0),
        _ => ModelImpl::Single(network_from_checkpoint::<f32>(&ck).map_err(from_md)?.0),
    };
    Ok(MdnetModel { inner })
}

/// Loads a checkpoint file into a model handle. Returns null on failure
/// (see [`mdnet_last_error`]). Compressed checkpoints are reconstructed
/// on load; fused checkpoints evaluate their fused domain.
#[no_mangle]
pub extern "C" fn mdnet_load(path: *const c_char) -> *mut MdnetModel {
    let mut out: *mut MdnetModel = std::ptr::null_mut();
    let status = guarded(|| {
        let path = unsafe { cstr_arg(path, "path") }?;
        out = Box::into_raw(Box::new(load_model(path)?));
        Ok(())
    });
    debug_assert!((status == MdnetStatus::Ok) == !out.is_null());
    out
}

/// Releases a model handle. Passing null is a no-op.
#[no_mangle]
pub extern "C" fn mdnet_free(model: *mut MdnetModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

unsafe fn model_arg<'a>(
    model: *const MdnetModel,
) -> Result<&'a MdnetModel, (MdnetStatus, String)> {
    if model.is_null() {
        return Err(usage("model is null"));
    }
    Ok(unsafe { &*model })
}

/// Number of domains the model serves.
#[no_mangle]
pub extern "C" fn mdnet_domains(model: *const MdnetModel) -> usize {
    let mut n = 0;
    guarded(|| {
        let m = unsafe { model_arg(model) }?;
        n = match &m.inner {
            ModelImpl::Single(net) => net.domains.len(),
            ModelImpl::Double(net) => net.domains.len(),
        };
        Ok(())
    });
    n
}

/// Number of classes of `domain`, or 0 if the domain does not exist.
#[no_mangle]
pub extern "C" fn mdnet_classes(model: *const MdnetModel, domain: usize) -> usize {
    let mut n = 0;
    guarded(|| {
        let m = unsafe { model_arg(model) }?;
        let counts = match &m.inner {
            ModelImpl::Single(net) => &net.cfg.class_counts,
            ModelImpl::Double(net) => &net.cfg.class_counts,
        };
        n = *counts
            .get(domain)
            .ok_or_else(|| usage(format!("unknown domain {domain}")))?;
        Ok(())
    });
    n
}

/// Number of input channels the model expects.
#[no_mangle]
pub extern "C" fn mdnet_input_channels(model: *const MdnetModel) -> usize {
    let mut n = 0;
    guarded(|| {
        let m = unsafe { model_arg(model) }?;
        n = match &m.inner {
            ModelImpl::Single(net) => net.cfg.input_channels,
            ModelImpl::Double(net) => net.cfg.input_channels,
        };
        Ok(())
    });
    n
}

fn eval_impl<S: Scalar>(
    net: &MultiDomainNet<S>,
    domain: usize,
    images: &[f32],
    dims: [usize; 4],
) -> Result<Vec<f32>, (MdnetStatus, String)> {
    let data: Vec<S> = images.iter().map(|&v| S::from_f64(v as f64)).collect();
    let x = Tensor::new(&dims, data).map_err(from_md)?;
    let logits = net.forward_eval(&x, domain).map_err(from_md)?;
    Ok(logits.data().iter().map(|v| v.to_f64() as f32).collect())
}

/// Evaluates `count` images (row-major `[count, height, width, channels]`
/// f32) on `domain` and writes `count * classes` logits into `logits_out`.
/// `logits_len` must be exactly `count * mdnet_classes(model, domain)`.
#[no_mangle]
pub extern "C" fn mdnet_eval(
    model: *const MdnetModel,
    domain: usize,
    images: *const f32,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    logits_out: *mut f32,
    logits_len: usize,
) -> MdnetStatus {
    guarded(|| {
        let m = unsafe { model_arg(model) }?;
        if images.is_null() || logits_out.is_null() {
            return Err(usage("images/logits_out is null"));
        }
        let pixels = count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| usage("image dimensions overflow"))?;
        if pixels == 0 {
            return Err(usage("image dimensions must be positive"));
        }
        let images = unsafe { std::slice::from_raw_parts(images, pixels) };
        let dims = [count, height, width, channels];
        let logits = match &m.inner {
            ModelImpl::Single(net) => eval_impl(net, domain, images, dims)?,
            ModelImpl::Double(net) => eval_impl(net, domain, images, dims)?,
        };
        if logits.len() != logits_len {
            return Err(usage(format!(
                "logits buffer holds {logits_len} values, need {}",
                logits.len()
            )));
        }
        unsafe { std::slice::from_raw_parts_mut(logits_out, logits_len) }
            .copy_from_slice(&logits);
        Ok(())
    })
}

/// Classifies `count` images on `domain`, writing one label per image.
/// Ties resolve to the lowest class index.
#[no_mangle]
pub extern "C" fn mdnet_predict(
    model: *const MdnetModel,
    domain: usize,
    images: *const f32,
    count: usize,
    height: usize,
    width: usize,
    channels: usize,
    labels_out: *mut u32,
) -> MdnetStatus {
    guarded(|| {
        let m = unsafe { model_arg(model) }?;
        if images.is_null() || labels_out.is_null() {
            return Err(usage("images/labels_out is null"));
        }
        let pixels = count
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| usage("image dimensions overflow"))?;
        if pixels == 0 {
            return Err(usage("image dimensions must be positive"));
        }
        let images = unsafe { std::slice::from_raw_parts(images, pixels) };
        let dims = [count, height, width, channels];
        let logits = match &m.inner {
            ModelImpl::Single(net) => eval_impl(net, domain, images, dims)?,
            ModelImpl::Double(net) => eval_impl(net, domain, images, dims)?,
        };
        let classes = logits.len() / count;
        let out = unsafe { std::slice::from_raw_parts_mut(labels_out, count) };
        for (i, row) in logits.chunks_exact(classes).enumerate() {
            let mut best = 0usize;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            out[i] = best as u32;
        }
        Ok(())
    })
}

/// Writes the hex digest of the model's shared convolutional weights into
/// `out` (at least 65 bytes: 64 hex characters plus NUL). Two models with
/// equal digests share their universal parameters byte for byte.
#[no_mangle]
pub extern "C" fn mdnet_universal_digest(
    model: *const MdnetModel,
    out: *mut c_char,
    capacity: usize,
) -> MdnetStatus {
    guarded(|| {
        let m = unsafe { model_arg(model) }?;
        if out.is_null() {
            return Err(usage("out is null"));
        }
        if capacity < 65 {
            return Err(usage("digest buffer needs 65 bytes"));
        }
        let ck = match &m.inner {
            ModelImpl::Single(net) => net.to_checkpoint(),
            ModelImpl::Double(net) => net.to_checkpoint(),
        }
        .map_err(from_md)?;
        let hex = mdnet_core::network::universal_digest(&ck);
        let bytes = hex.as_bytes();
        let dst = unsafe { std::slice::from_raw_parts_mut(out as *mut u8, bytes.len() + 1) };
        dst[..bytes.len()].copy_from_slice(bytes);
        dst[bytes.len()] = 0;
        Ok(())
    })
}

/// Folds `domain`'s adapters into the filters of the checkpoint at `src`
/// and writes the result to `dst`. The original records ride along, so
/// [`mdnet_unfuse_file`] restores `src` bitwise.
#[no_mangle]
pub extern "C" fn mdnet_fuse_file(
    src: *const c_char,
    domain: usize,
    dst: *const c_char,
) -> MdnetStatus {
    guarded(|| {
        let src = unsafe { cstr_arg(src, "src") }?;
        let dst = unsafe { cstr_arg(dst, "dst") }?;
        let bytes =
            std::fs::read(src).map_err(|e| (MdnetStatus::Runtime, format!("{src}: {e}")))?;
        let ck = Checkpoint::decode(&bytes, src).map_err(from_md)?;
        let dtype = ck
            .get("universal/layer/0/filter")
            .map(|r| r.dtype())
            .ok_or_else(|| usage(format!("{src}: not a network checkpoint")))?;
        let fused = match dtype {
            Dtype::Double => fuse_checkpoint::<f64>(&ck, domain),
            _ => fuse_checkpoint::<f32>(&ck, domain),
        }
        .map_err(from_md)?;
        std::fs::write(dst, fused.encode())
            .map_err(|e| (MdnetStatus::Runtime, format!("{dst}: {e}")))?;
        Ok(())
    })
}

/// Inverse of [`mdnet_fuse_file`]: restores the original checkpoint
/// bitwise from a fused one.
#[no_mangle]
pub extern "C" fn mdnet_unfuse_file(src: *const c_char, dst: *const c_char) -> MdnetStatus {
    guarded(|| {
        let src = unsafe { cstr_arg(src, "src") }?;
        let dst = unsafe { cstr_arg(dst, "dst") }?;
        let bytes =
            std::fs::read(src).map_err(|e| (MdnetStatus::Runtime, format!("{src}: {e}")))?;
        let ck = Checkpoint::decode(&bytes, src).map_err(from_md)?;
        let restored = unfuse_checkpoint(&ck).map_err(from_md)?;
        std::fs::write(dst, restored.encode())
            .map_err(|e| (MdnetStatus::Runtime, format!("{dst}: {e}")))?;
        Ok(())
    })
}
