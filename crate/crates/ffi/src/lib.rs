//! C ABI over the sonoseg model: load a checkpoint, open a session on a grayscale
//! image, add clicks or a box, and read back the binary mask.
//!
//! Every fallible call returns a [`SonosegStatus`]. On failure the message is kept in a
//! thread-local slot readable with [`sonoseg_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sonoseg::model::{load_checkpoint, ImageEmbedding, PromptSegModel};
use sonoseg::{BinaryMask, BoxPrompt, Error, ImageGrid, Point, PromptSet};

/// Status codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SonosegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    NoPrompt = 6,
    InvalidPrompt = 7,
    Internal = 8,
    BufferTooSmall = 9,
}

/// Opaque model handle.
pub struct SonosegModel {
    model: PromptSegModel,
}

/// Opaque per-image session holding the cached embedding and the prompts so far.
pub struct SonosegSession {
    model: *const SonosegModel,
    embedding: ImageEmbedding,
    height: usize,
    width: usize,
    prompts: PromptSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> SonosegStatus {
    match e {
        Error::Io { .. } => SonosegStatus::Io,
        Error::Checkpoint(_) | Error::ConfigMismatch(_) => SonosegStatus::Checkpoint,
        Error::Ingest { .. } | Error::ShapeMismatch { .. } => SonosegStatus::Shape,
        Error::NoPrompt => SonosegStatus::NoPrompt,
        Error::InvalidPrompt(_) => SonosegStatus::InvalidPrompt,
        Error::Config(_) | Error::Empty(_) | Error::Data { .. } => SonosegStatus::InvalidArgument,
        _ => SonosegStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (SonosegStatus, String)>) -> SonosegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SonosegStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside sonoseg");
            SonosegStatus::Internal
        }
    }
}

fn lift(e: Error) -> (SonosegStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SonosegStatus, String) {
    (SonosegStatus::NullPointer, format!("{what} is null"))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated, truncated
/// to fit). Returns the full message length excluding the terminator, or 0 if none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a checkpoint written by the toolkit.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_model_load(
    path: *const c_char,
    out: *mut *mut SonosegModel,
) -> SonosegStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| (SonosegStatus::InvalidArgument, "path is not UTF-8".to_string()))?;
        let (model, _) = load_checkpoint(Path::new(path)).map_err(lift)?;
        *out = Box::into_raw(Box::new(SonosegModel { model }));
        Ok(())
    })
}

/// Releases a model. Sessions opened on it must be freed first.
///
/// # Safety
/// `model` must be null or a handle from [`sonoseg_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_model_free(model: *mut SonosegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total parameter count of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_model_parameter_count(model: *const SonosegModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.config().parameter_count())
}

/// Encodes a row-major 8-bit grayscale image and opens a session on it.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `height * width` bytes and
/// `out` must be a valid pointer. The session must not outlive the model.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_session_new(
    model: *const SonosegModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    out: *mut *mut SonosegSession,
) -> SonosegStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let n = height
            .checked_mul(width)
            .filter(|&n| n > 0)
            .ok_or((SonosegStatus::InvalidArgument, "image must be non-empty".to_string()))?;
        let bytes = std::slice::from_raw_parts(pixels, n);
        let image = ImageGrid::from_u8(height, width, bytes).map_err(lift)?;
        let embedding = m.model.encode_image(&image).map_err(lift)?;
        *out = Box::into_raw(Box::new(SonosegSession {
            model,
            embedding,
            height,
            width,
            prompts: PromptSet::default(),
        }));
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a live session handle.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_session_free(session: *mut SonosegSession) {
    if !session.is_null() {
        drop(Box::from_raw(session));
    }
}

/// Appends a click at column `x`, row `y`. `positive` is nonzero for foreground.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_session_add_point(
    session: *mut SonosegSession,
    x: usize,
    y: usize,
    positive: i32,
) -> SonosegStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let point = if positive != 0 {
            Point::positive(x, y)
        } else {
            Point::negative(x, y)
        };
        let next = s.prompts.with_point(point);
        next.validate_bounds(s.height, s.width).map_err(lift)?;
        s.prompts = next;
        Ok(())
    })
}

/// Sets the box prompt covering columns `x0..x1` and rows `y0..y1`, replacing any previous box.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_session_set_box(
    session: *mut SonosegSession,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
) -> SonosegStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        let mut next = s.prompts.clone();
        next.bbox = Some(BoxPrompt { x0, y0, x1, y1 });
        next.validate_bounds(s.height, s.width).map_err(lift)?;
        s.prompts = next;
        Ok(())
    })
}

/// Drops every prompt of the session.
///
/// # Safety
/// `session` must be a live session handle.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_session_clear(session: *mut SonosegSession) -> SonosegStatus {
    guard(|| {
        let s = session.as_mut().ok_or_else(|| null("session"))?;
        s.prompts = PromptSet::default();
        Ok(())
    })
}

/// Writes the predicted mask (0 or 1 per pixel, row-major) into `mask`.
///
/// # Safety
/// `session` must be a live session whose model is alive; `mask` must point to `len`
/// writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_session_predict(
    session: *const SonosegSession,
    mask: *mut u8,
    len: usize,
) -> SonosegStatus {
    guard(|| {
        let s = session.as_ref().ok_or_else(|| null("session"))?;
        let m = s.model.as_ref().ok_or_else(|| null("model"))?;
        if mask.is_null() {
            return Err(null("mask"));
        }
        if len < s.height * s.width {
            return Err((
                SonosegStatus::BufferTooSmall,
                format!("mask buffer holds {len} bytes, need {}", s.height * s.width),
            ));
        }
        s.prompts.validate(s.height, s.width).map_err(lift)?;
        let (_, pred) = m
            .model
            .predict_embedded(&s.embedding, &s.prompts)
            .map_err(lift)?;
        std::ptr::copy_nonoverlapping(pred.data().as_ptr(), mask, pred.data().len());
        Ok(())
    })
}

/// Dice similarity of two binary masks of `len` bytes (nonzero means foreground).
///
/// # Safety
/// `a` and `b` must point to `len` readable bytes and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sonoseg_dsc(
    a: *const u8,
    b: *const u8,
    len: usize,
    out: *mut f64,
) -> SonosegStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let norm = |p: *const u8| -> Vec<u8> {
            std::slice::from_raw_parts(p, len)
                .iter()
                .map(|&v| u8::from(v != 0))
                .collect()
        };
        let ma = BinaryMask::new(1, len, norm(a)).map_err(lift)?;
        let mb = BinaryMask::new(1, len, norm(b)).map_err(lift)?;
        *out = sonoseg::metrics::dsc(&ma, &mb).map_err(lift)?;
        Ok(())
    })
}
