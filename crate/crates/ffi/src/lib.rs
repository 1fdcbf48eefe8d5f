//! C ABI for model loading and streaming decoding. Handles are opaque
//! pointers; every fallible call returns a `BrookStatus` and leaves a
//! human-readable message retrievable with `brook_last_error` (thread-local,
//! valid until the next failing call on the same thread).
//!
//! A session borrows its model: the model must outlive every session created
//! from it, and a (model, session) pair must not be used from two threads at
//! once.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

use brook::data::{stack_frames, FRAME_STACK_STRIDE};
use brook::model::Model;
use brook::numcore::Tensor;
use brook::search::{decode_stacked, StreamingSession};
use brook::Error;

/// Status codes mirroring the CLI's exit codes.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BrookStatus {
    BrookOk = 0,
    BrookErr = 1,
    BrookErrConfig = 2,
    BrookErrData = 3,
    BrookErrNumerical = 4,
    BrookErrNullArg = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(e: &Error) -> BrookStatus {
    set_error(e.to_string());
    match e {
        Error::Config(_) => BrookStatus::BrookErrConfig,
        Error::Data { .. } | Error::Io(_) | Error::Infeasible(_) => BrookStatus::BrookErrData,
        Error::Numerical(_) => BrookStatus::BrookErrNumerical,
        _ => BrookStatus::BrookErr,
    }
}

fn null_arg(what: &str) -> BrookStatus {
    set_error(format!("null argument: {what}"));
    BrookStatus::BrookErrNullArg
}

/// Opaque handle to a loaded model.
pub struct BrookModel {
    inner: Model,
}

/// Opaque handle to one streaming decode in progress.
pub struct BrookSession {
    // the session borrows the model through a raw pointer; the caller
    // guarantees the model outlives the session (see module docs)
    inner: StreamingSession<'static>,
    confirmed: Vec<u32>,
    provisional: Vec<u32>,
    done: bool,
}

/// Message for the most recent failure on this thread, or NULL if none.
/// The pointer is invalidated by the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn brook_last_error() -> *const libc::c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Loads a model checkpoint. Returns NULL on failure (see `brook_last_error`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn brook_model_load(path: *const libc::c_char) -> *mut BrookModel {
    if path.is_null() {
        null_arg("path");
        return std::ptr::null_mut();
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return std::ptr::null_mut();
        }
    };
    match Model::load(Path::new(path)) {
        Ok(m) => Box::into_raw(Box::new(BrookModel { inner: m })),
        Err(e) => {
            fail(&e);
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `model` must come from `brook_model_load` and not yet be freed; all
/// sessions created from it must already be freed.
#[no_mangle]
pub unsafe extern "C" fn brook_model_free(model: *mut BrookModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Pre-stacking feature dimension the model expects.
///
/// # Safety
/// `model` must be a live handle from `brook_model_load`.
#[no_mangle]
pub unsafe extern "C" fn brook_model_feat_dim(model: *const BrookModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.cfg.feat_dim
}

/// Chunk size in post-stacking encoder frames (the maximum rows per push).
///
/// # Safety
/// `model` must be a live handle from `brook_model_load`.
#[no_mangle]
pub unsafe extern "C" fn brook_model_chunk_frames(model: *const BrookModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).inner.cfg.chunk_frames
}

/// Starts a streaming decode. Returns NULL on failure.
///
/// # Safety
/// `model` must be a live handle and must outlive the returned session.
#[no_mangle]
pub unsafe extern "C" fn brook_session_new(
    model: *const BrookModel,
    beam: usize,
) -> *mut BrookSession {
    if model.is_null() {
        null_arg("model");
        return std::ptr::null_mut();
    }
    let m: &'static Model = &*std::ptr::addr_of!((*model).inner);
    match StreamingSession::new(m, beam) {
        Ok(s) => Box::into_raw(Box::new(BrookSession {
            inner: s,
            confirmed: Vec::new(),
            provisional: Vec::new(),
            done: false,
        })),
        Err(e) => {
            fail(&e);
            std::ptr::null_mut()
        }
    }
}

/// # Safety
/// `session` must come from `brook_session_new` and not yet be freed.
#[no_mangle]
pub unsafe extern "C" fn brook_session_free(session: *mut BrookSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Pushes `rows` post-stacking frames (row-major, `rows` x stacked dim,
/// 1 <= rows <= chunk_frames). Tokens confirmed so far grow monotonically;
/// read them back with `brook_session_confirmed`.
///
/// # Safety
/// `session` must be live; `frames` must point to `rows * stacked_dim`
/// readable floats (stacked dim = 4 x `brook_model_feat_dim`).
#[no_mangle]
pub unsafe extern "C" fn brook_session_push(
    session: *mut BrookSession,
    frames: *const f32,
    rows: usize,
) -> BrookStatus {
    if session.is_null() {
        return null_arg("session");
    }
    if frames.is_null() {
        return null_arg("frames");
    }
    let s = &mut *session;
    let d = s.inner.model().cfg.stacked_dim();
    let data = std::slice::from_raw_parts(frames, rows * d).to_vec();
    let t = match Tensor::new(vec![rows, d], data) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    match s.inner.push_chunk(&t) {
        Ok(delta) => {
            s.confirmed.extend_from_slice(&delta.confirmed);
            s.provisional = delta.provisional;
            BrookStatus::BrookOk
        }
        Err(e) => fail(&e),
    }
}

/// Flushes buffered frames and fixes the final transcript.
///
/// # Safety
/// `session` must be live.
#[no_mangle]
pub unsafe extern "C" fn brook_session_finalize(session: *mut BrookSession) -> BrookStatus {
    if session.is_null() {
        return null_arg("session");
    }
    let s = &mut *session;
    match s.inner.finalize() {
        Ok(tokens) => {
            s.confirmed = tokens;
            s.provisional.clear();
            s.done = true;
            BrookStatus::BrookOk
        }
        Err(e) => fail(&e),
    }
}

unsafe fn copy_tokens(src: &[u32], out: *mut u32, cap: usize) -> usize {
    if !out.is_null() {
        let n = src.len().min(cap);
        std::ptr::copy_nonoverlapping(src.as_ptr(), out, n);
    }
    src.len()
}

/// Copies up to `cap` confirmed tokens into `out` and returns the total
/// number available (call with `out = NULL` to size the buffer).
///
/// # Safety
/// `session` must be live; `out` must be NULL or point to `cap` writable u32s.
#[no_mangle]
pub unsafe extern "C" fn brook_session_confirmed(
    session: *const BrookSession,
    out: *mut u32,
    cap: usize,
) -> usize {
    if session.is_null() {
        return 0;
    }
    copy_tokens(&(*session).confirmed, out, cap)
}

/// Like `brook_session_confirmed` but for the current best hypothesis's
/// not-yet-confirmed tail (empty after finalize).
///
/// # Safety
/// Same contract as `brook_session_confirmed`.
#[no_mangle]
pub unsafe extern "C" fn brook_session_provisional(
    session: *const BrookSession,
    out: *mut u32,
    cap: usize,
) -> usize {
    if session.is_null() {
        return 0;
    }
    copy_tokens(&(*session).provisional, out, cap)
}

/// One-shot decode of a whole utterance given raw pre-stacking features
/// (row-major, `rows` x `brook_model_feat_dim`). Writes up to `cap` tokens
/// to `out` and stores the full count in `*out_len`.
///
/// # Safety
/// `model` must be live; `frames` must point to `rows * feat_dim` readable
/// floats; `out` must be NULL or point to `cap` writable u32s; `out_len`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn brook_decode(
    model: *const BrookModel,
    frames: *const f32,
    rows: usize,
    beam: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> BrookStatus {
    if model.is_null() {
        return null_arg("model");
    }
    if frames.is_null() {
        return null_arg("frames");
    }
    if out_len.is_null() {
        return null_arg("out_len");
    }
    let m = &(*model).inner;
    let d = m.cfg.feat_dim;
    let data = std::slice::from_raw_parts(frames, rows * d).to_vec();
    let raw = match Tensor::new(vec![rows, d], data) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    let stacked = match stack_frames(&raw, FRAME_STACK_STRIDE) {
        Ok(t) => t,
        Err(e) => return fail(&e),
    };
    match decode_stacked(m, &stacked, beam) {
        Ok(tokens) => {
            copy_tokens(&tokens, out, cap);
            *out_len = tokens.len();
            BrookStatus::BrookOk
        }
        Err(e) => fail(&e),
    }
}
