//! C ABI over the salprune inference path and Q4_0 block codec.
//!
//! Every function returns an [`SpStatus`]; on failure a message is kept per
//! thread and can be fetched with [`sp_last_error`]. Models are opaque
//! handles released with [`sp_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use salprune::model::{forward_lm, Checkpoint};
use salprune::quant::{dequantize_block, quantize_block, Q4Block, BLOCK_BYTES, BLOCK_LEN};
use salprune::Error;

pub const SP_Q4_BLOCK_LEN: usize = 32;
pub const SP_Q4_BLOCK_BYTES: usize = 18;
const _: () = assert!(SP_Q4_BLOCK_LEN == BLOCK_LEN && SP_Q4_BLOCK_BYTES == BLOCK_BYTES);

#[repr(i32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpStatus {
    SpOk = 0,
    SpErrNull = 1,
    SpErrIo = 2,
    SpErrFormat = 3,
    SpErrInvalid = 4,
    SpErrNumerical = 5,
    SpErrBufferTooSmall = 6,
    SpErrPanic = 7,
}

/// Opaque model handle.
pub struct SpModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SpStatus {
    match e {
        Error::Io { .. } => SpStatus::SpErrIo,
        Error::Spt(_) | Error::Json(_) => SpStatus::SpErrFormat,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::MaskOptimizationAborted { .. } => SpStatus::SpErrNumerical,
        _ => SpStatus::SpErrInvalid,
    }
}

fn guard<F: FnOnce() -> Result<(), SpStatus>>(f: F) -> SpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SpStatus::SpOk,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside salprune");
            SpStatus::SpErrPanic
        }
    }
}

fn fail(e: Error) -> SpStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

fn null(what: &str) -> SpStatus {
    set_error(format!("{what} is null"));
    SpStatus::SpErrNull
}

fn tokens_from(tokens: *const u32, n: usize) -> Result<Vec<usize>, SpStatus> {
    if n == 0 {
        set_error("token sequence is empty");
        return Err(SpStatus::SpErrInvalid);
    }
    if tokens.is_null() {
        return Err(null("tokens"));
    }
    // SAFETY: caller guarantees `tokens` points at `n` readable u32 values.
    let s: &[u32] = unsafe { std::slice::from_raw_parts(tokens, n) };
    Ok(s.iter().map(|&t| t as usize).collect())
}

/// Loads an SPT checkpoint. On success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sp_model_load(path: *const c_char, out: *mut *mut SpModel) -> SpStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| {
            set_error("path is not valid UTF-8");
            SpStatus::SpErrInvalid
        })?;
        let ckpt = Checkpoint::load(Path::new(p)).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(SpModel { ckpt })) };
        Ok(())
    })
}

/// Releases a handle from [`sp_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`sp_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sp_model_free(model: *mut SpModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_vocab_size(model: *const SpModel, out: *mut usize) -> SpStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = m.ckpt.config().vocab_size;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_context_length(model: *const SpModel, out: *mut usize) -> SpStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = m.ckpt.config().context_length;
        Ok(())
    })
}

/// Writes `n · vocab_size` row-major logits to `logits`, which holds
/// `logits_len` floats. Masks stored in the checkpoint are applied.
///
/// # Safety
/// `tokens` must hold `n` values and `logits` `logits_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn sp_model_forward(
    model: *const SpModel,
    tokens: *const u32,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> SpStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if logits.is_null() {
            return Err(null("logits"));
        }
        let ids = tokens_from(tokens, n)?;
        let need = n * m.ckpt.config().vocab_size;
        if logits_len < need {
            set_error(format!("logits buffer holds {logits_len} floats, need {need}"));
            return Err(SpStatus::SpErrBufferTooSmall);
        }
        let out = forward_lm(&m.ckpt, &ids, m.ckpt.masks()).map_err(fail)?;
        let dst = unsafe { std::slice::from_raw_parts_mut(logits, need) };
        dst.copy_from_slice(out.data());
        Ok(())
    })
}

/// Perplexity of `tokens` (at least two) under the model.
///
/// # Safety
/// `tokens` must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sp_model_perplexity(
    model: *const SpModel,
    tokens: *const u32,
    n: usize,
    out: *mut f64,
) -> SpStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let ids = tokens_from(tokens, n)?;
        *out = salprune::eval::perplexity(&m.ckpt, &ids).map_err(fail)?;
        Ok(())
    })
}

/// Encodes 32 floats into one 18-byte Q4_0 block.
///
/// # Safety
/// `weights` must hold 32 floats and `out` 18 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sp_q4_quantize_block(weights: *const f32, out: *mut u8) -> SpStatus {
    guard(|| {
        if weights.is_null() {
            return Err(null("weights"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let w: &[f32; BLOCK_LEN] = unsafe { &*(weights as *const [f32; BLOCK_LEN]) };
        let block = quantize_block(w).map_err(fail)?;
        let dst = unsafe { std::slice::from_raw_parts_mut(out, BLOCK_BYTES) };
        dst.copy_from_slice(&block.to_bytes());
        Ok(())
    })
}

/// Decodes one 18-byte Q4_0 block into 32 floats.
///
/// # Safety
/// `block` must hold 18 bytes and `out` 32 writable floats.
#[no_mangle]
pub unsafe extern "C" fn sp_q4_dequantize_block(block: *const u8, out: *mut f32) -> SpStatus {
    guard(|| {
        if block.is_null() {
            return Err(null("block"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let bytes = unsafe { std::slice::from_raw_parts(block, BLOCK_BYTES) };
        let w = dequantize_block(&Q4Block::from_bytes(bytes));
        let dst = unsafe { std::slice::from_raw_parts_mut(out, BLOCK_LEN) };
        dst.copy_from_slice(&w);
        Ok(())
    })
}

/// Copies this thread's last error message, NUL-terminated and truncated to
/// `len` bytes, into `buf`. Returns the full message length plus one, so a
/// call with `len == 0` sizes the buffer.
///
/// # Safety
/// `buf` must hold `len` writable bytes, or be null when `len` is 0.
#[no_mangle]
pub unsafe extern "C" fn sp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len() + 1
    })
}
