//! C ABI for loading encbridge checkpoints and running greedy translation.
//!
//! Every function is callable from C (and anything that can speak the C ABI).
//! The conventions are:
//!
//! * Models are opaque handles ([`EncbridgeModel`]). Create one with
//!   [`encbridge_model_load`], release it with [`encbridge_model_free`].
//! * Fallible calls return an [`EncbridgeStatus`] code; `ENCBRIDGE_STATUS_OK`
//!   (0) means success. On failure a human-readable message is stored in
//!   thread-local storage and can be fetched with
//!   [`encbridge_last_error_message`].
//! * Strings crossing the boundary are NUL-terminated UTF-8. Output strings
//!   are written into caller-provided buffers; when the buffer is too small
//!   the call reports the required size so the caller can retry.
//!
//! The generated header lives at `include/encbridge.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use encbridge::data::Vocab;
use encbridge::model::greedy_decode;
use encbridge::train::Checkpoint;
use encbridge::{ModelConfig, ParamStore};

/// Result code returned by every fallible FFI call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncbridgeStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The checkpoint could not be read or parsed.
    LoadFailed = 3,
    /// The forward pass failed during decoding.
    DecodeFailed = 4,
    /// The caller-provided output buffer is too small; the required size was
    /// written to the length out-parameter.
    BufferTooSmall = 5,
    /// An internal invariant was violated (a panic was caught at the
    /// boundary).
    Internal = 6,
}

/// A loaded model: configuration, weights, and vocabulary. Opaque to C.
pub struct EncbridgeModel {
    config: ModelConfig,
    params: ParamStore<f32>,
    vocab: Vocab,
}

thread_local! {
    static LAST_ERROR: RefCell<Vec<u8>> = const { RefCell::new(Vec::new()) };
}

fn set_last_error(msg: impl Into<String>) {
    let mut bytes = msg.into().into_bytes();
    bytes.retain(|&b| b != 0);
    LAST_ERROR.with(|slot| *slot.borrow_mut() = bytes);
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().clear());
}

/// Render an error and its source chain on one line.
fn error_chain(err: &dyn std::error::Error) -> String {
    let mut out = err.to_string();
    let mut cur = err.source();
    while let Some(src) = cur {
        out.push_str(": ");
        out.push_str(&src.to_string());
        cur = src.source();
    }
    out
}

/// Run `f`, converting panics into `Internal` instead of unwinding into C.
fn guard(f: impl FnOnce() -> EncbridgeStatus) -> EncbridgeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("internal panic: {msg}"));
            EncbridgeStatus::Internal
        }
    }
}

/// Copy `text` into `buf`/`cap` as a NUL-terminated string. Writes the
/// required capacity (including the NUL) through `needed` when non-NULL and
/// reports whether the copy fit.
unsafe fn write_c_string(
    text: &[u8],
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> EncbridgeStatus {
    let required = text.len() + 1;
    if !needed.is_null() {
        *needed = required;
    }
    if buf.is_null() || cap < required {
        return EncbridgeStatus::BufferTooSmall;
    }
    std::ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
    *buf.add(text.len()) = 0;
    EncbridgeStatus::Ok
}

/// Library version as a static NUL-terminated string. Never NULL.
#[no_mangle]
pub extern "C" fn encbridge_version() -> *const c_char {
    static VERSION: &CStr = {
        const BYTES: &[u8] = concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes();
        match CStr::from_bytes_with_nul(BYTES) {
            Ok(s) => s,
            Err(_) => panic!("version string contains NUL"),
        }
    };
    VERSION.as_ptr()
}

/// Copy the message describing the most recent failure on this thread into
/// `buf`. Returns the size the message needs, including the NUL terminator;
/// the message is truncated if `cap` is smaller. An empty message (required
/// size 1) means no error has been recorded.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be NULL (in which case only
/// the required size is returned).
#[no_mangle]
pub unsafe extern "C" fn encbridge_last_error_message(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let required = msg.len() + 1;
        if !buf.is_null() && cap > 0 {
            let copy = msg.len().min(cap - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, copy);
            *buf.add(copy) = 0;
        }
        required
    })
}

/// Load a model from a checkpoint file written by the `encbridge` trainer.
/// On success writes a handle through `out_model`; the caller owns it and must
/// release it with [`encbridge_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out_model` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn encbridge_model_load(
    path: *const c_char,
    out_model: *mut *mut EncbridgeModel,
) -> EncbridgeStatus {
    guard(|| {
        if path.is_null() || out_model.is_null() {
            set_last_error("path and out_model must be non-NULL");
            return EncbridgeStatus::NullArgument;
        }
        *out_model = std::ptr::null_mut();
        let path = match CStr::from_ptr(path).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_last_error("path is not valid UTF-8");
                return EncbridgeStatus::InvalidUtf8;
            }
        };
        match Checkpoint::load(Path::new(path)) {
            Ok(ckpt) => {
                let model = Box::new(EncbridgeModel {
                    config: ckpt.config,
                    params: ckpt.params,
                    vocab: ckpt.vocab,
                });
                *out_model = Box::into_raw(model);
                clear_last_error();
                EncbridgeStatus::Ok
            }
            Err(err) => {
                set_last_error(error_chain(&err));
                EncbridgeStatus::LoadFailed
            }
        }
    })
}

/// Release a model handle. NULL is ignored.
///
/// # Safety
/// `model` must be a handle returned by [`encbridge_model_load`] that has not
/// already been freed.
#[no_mangle]
pub unsafe extern "C" fn encbridge_model_free(model: *mut EncbridgeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of entries in the model's vocabulary, including the four reserved
/// tokens. Returns 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle from [`encbridge_model_load`].
#[no_mangle]
pub unsafe extern "C" fn encbridge_model_vocab_size(model: *const EncbridgeModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).config.vocab_size
}

/// Model width (`d_model`). Returns 0 for a NULL handle.
///
/// # Safety
/// `model` must be NULL or a live handle from [`encbridge_model_load`].
#[no_mangle]
pub unsafe extern "C" fn encbridge_model_d_model(model: *const EncbridgeModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).config.d_model
}

/// Translate one whitespace-tokenized source sentence with greedy decoding.
///
/// `input` is tokenized on whitespace; tokens outside the vocabulary map to
/// the unknown token. `max_len` caps the number of emitted tokens; pass 0 for
/// the model's context limit. The translation is written into `out_buf` as a
/// NUL-terminated, space-separated string, and the capacity it requires
/// (including the NUL) is written through `out_needed` when non-NULL. If
/// `out_cap` is too small the call returns `BufferTooSmall` and the caller can
/// retry with `*out_needed` bytes.
///
/// # Safety
/// `model` must be a live handle, `input` a NUL-terminated string, and
/// `out_buf` must point to `out_cap` writable bytes (or be NULL to only query
/// the required size).
#[no_mangle]
pub unsafe extern "C" fn encbridge_model_translate(
    model: *const EncbridgeModel,
    input: *const c_char,
    max_len: usize,
    out_buf: *mut c_char,
    out_cap: usize,
    out_needed: *mut usize,
) -> EncbridgeStatus {
    guard(|| {
        if model.is_null() || input.is_null() {
            set_last_error("model and input must be non-NULL");
            return EncbridgeStatus::NullArgument;
        }
        let model = &*model;
        let input = match CStr::from_ptr(input).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_last_error("input is not valid UTF-8");
                return EncbridgeStatus::InvalidUtf8;
            }
        };
        let cap = if max_len == 0 {
            model.config.max_seq_len.saturating_sub(1)
        } else {
            max_len
        };
        let src = model.vocab.encode(input);
        let ids = match greedy_decode(&model.config, &model.params, &src, cap) {
            Ok(ids) => ids,
            Err(err) => {
                set_last_error(error_chain(&err));
                return EncbridgeStatus::DecodeFailed;
            }
        };
        let text = model.vocab.decode(&ids);
        let status = write_c_string(text.as_bytes(), out_buf, out_cap, out_needed);
        match status {
            EncbridgeStatus::Ok => clear_last_error(),
            EncbridgeStatus::BufferTooSmall => {
                set_last_error(format!(
                    "output buffer too small: need {} bytes, have {out_cap}",
                    text.len() + 1
                ));
            }
            _ => {}
        }
        status
    })
}
