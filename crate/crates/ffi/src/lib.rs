//! C ABI for the inversion/editing pipeline: opaque handle, status
//! codes, and a thread-local last-error message. The generated header
//! lives in `include/styleinv.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use styleinv::error::Error;
use styleinv::pipeline::Pipeline;
use styleinv::stylegen::EditDirection;
use styleinv::tensor::Tensor;

/// Opaque pipeline handle.
pub struct StyleinvPipeline {
    inner: Pipeline,
}

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StyleinvStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// File could not be read, or is corrupt / wrong version.
    Io = 2,
    /// A buffer length or tensor shape did not match the model.
    Shape = 3,
    /// Configuration rejected by validation.
    Config = 4,
    /// Numerical failure (non-finite values) during inference.
    Numerical = 5,
    /// Any other internal failure.
    Internal = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let clean: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).unwrap());
}

fn status_of(err: &Error) -> StyleinvStatus {
    match err {
        Error::Shape(_) | Error::Domain(_) => StyleinvStatus::Shape,
        Error::Config(_) => StyleinvStatus::Config,
        Error::Numerical(_) => StyleinvStatus::Numerical,
        Error::Io(_) | Error::Version(_) | Error::Corruption(_) => StyleinvStatus::Io,
        _ => StyleinvStatus::Internal,
    }
}

fn guard(f: impl FnOnce() -> StyleinvStatus) -> StyleinvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            StyleinvStatus::Internal
        }
    }
}

/// Message describing the most recent error on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn styleinv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a pipeline from a checkpoint file. On success writes a handle
/// that must be released with `styleinv_free`.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn styleinv_load(
    path: *const c_char,
    out: *mut *mut StyleinvPipeline,
) -> StyleinvStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            set_error("null argument to styleinv_load");
            return StyleinvStatus::NullArgument;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("checkpoint path is not valid UTF-8");
                return StyleinvStatus::Config;
            }
        };
        match Pipeline::load(Path::new(path)) {
            Ok(p) => {
                unsafe { *out = Box::into_raw(Box::new(StyleinvPipeline { inner: p })) };
                StyleinvStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a handle obtained from `styleinv_load`. Null is a no-op.
///
/// # Safety
/// `p` must be a handle returned by `styleinv_load` (or null) and must
/// not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn styleinv_free(p: *mut StyleinvPipeline) {
    if !p.is_null() {
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Image side length R of the loaded model; buffers are 3*R*R floats.
///
/// # Safety
/// `p` and `side` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn styleinv_image_side(
    p: *const StyleinvPipeline,
    side: *mut usize,
) -> StyleinvStatus {
    guard(|| {
        if p.is_null() || side.is_null() {
            set_error("null argument to styleinv_image_side");
            return StyleinvStatus::NullArgument;
        }
        unsafe { *side = (*p).inner.cfg.r };
        StyleinvStatus::Ok
    })
}

/// Latent dimensions: `rows` = generator depth L_g, `cols` = d_w.
/// Direction buffers are rows*cols floats, row-major.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn styleinv_latent_dims(
    p: *const StyleinvPipeline,
    rows: *mut usize,
    cols: *mut usize,
) -> StyleinvStatus {
    guard(|| {
        if p.is_null() || rows.is_null() || cols.is_null() {
            set_error("null argument to styleinv_latent_dims");
            return StyleinvStatus::NullArgument;
        }
        unsafe {
            *rows = (*p).inner.cfg.l_g;
            *cols = (*p).inner.cfg.d_w;
        }
        StyleinvStatus::Ok
    })
}

unsafe fn image_in(p: &Pipeline, data: *const f32, len: usize) -> Result<Tensor, StyleinvStatus> {
    let r = p.cfg.r;
    let want = 3 * r * r;
    if data.is_null() {
        set_error("null image buffer");
        return Err(StyleinvStatus::NullArgument);
    }
    if len != want {
        set_error(&format!("image buffer has {len} floats, model wants {want}"));
        return Err(StyleinvStatus::Shape);
    }
    let slice = unsafe { std::slice::from_raw_parts(data, len) };
    Tensor::new(vec![3, r, r], slice.to_vec()).map_err(|e| {
        set_error(&e.to_string());
        StyleinvStatus::Shape
    })
}

unsafe fn image_out(img: &Tensor, out: *mut f32, out_len: usize) -> StyleinvStatus {
    if out.is_null() {
        set_error("null output buffer");
        return StyleinvStatus::NullArgument;
    }
    let d = img.data();
    if out_len != d.len() {
        set_error(&format!(
            "output buffer has {out_len} floats, result needs {}",
            d.len()
        ));
        return StyleinvStatus::Shape;
    }
    unsafe { ptr::copy_nonoverlapping(d.as_ptr(), out, d.len()) };
    StyleinvStatus::Ok
}

/// Invert an image: reconstructs it through the encoder + generator.
/// `image` and `out_image` are 3*R*R floats in [-1, 1], channel-major.
///
/// # Safety
/// `p` must be a live handle; buffers must match the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn styleinv_invert(
    p: *const StyleinvPipeline,
    image: *const f32,
    image_len: usize,
    out_image: *mut f32,
    out_len: usize,
) -> StyleinvStatus {
    guard(|| {
        if p.is_null() {
            set_error("null pipeline handle");
            return StyleinvStatus::NullArgument;
        }
        let pipe = unsafe { &(*p).inner };
        let x = match unsafe { image_in(pipe, image, image_len) } {
            Ok(t) => t,
            Err(s) => return s,
        };
        match pipe.invert(&x) {
            Ok(r) => unsafe { image_out(&r.image, out_image, out_len) },
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Edit an image along a direction (L_g*d_w floats, row-major) scaled
/// by `scale`. Scale 0 is exactly equivalent to `styleinv_invert`.
///
/// # Safety
/// `p` must be a live handle; buffers must match the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn styleinv_edit(
    p: *const StyleinvPipeline,
    image: *const f32,
    image_len: usize,
    direction: *const f32,
    direction_len: usize,
    scale: f32,
    out_image: *mut f32,
    out_len: usize,
) -> StyleinvStatus {
    guard(|| {
        if p.is_null() {
            set_error("null pipeline handle");
            return StyleinvStatus::NullArgument;
        }
        let pipe = unsafe { &(*p).inner };
        let x = match unsafe { image_in(pipe, image, image_len) } {
            Ok(t) => t,
            Err(s) => return s,
        };
        if direction.is_null() {
            set_error("null direction buffer");
            return StyleinvStatus::NullArgument;
        }
        let want = pipe.cfg.l_g * pipe.cfg.d_w;
        if direction_len != want {
            set_error(&format!(
                "direction buffer has {direction_len} floats, model wants {want}"
            ));
            return StyleinvStatus::Shape;
        }
        let dslice = unsafe { std::slice::from_raw_parts(direction, direction_len) };
        let dir = match Tensor::new(vec![pipe.cfg.l_g, pipe.cfg.d_w], dslice.to_vec())
            .and_then(EditDirection::new)
        {
            Ok(d) => d,
            Err(e) => {
                set_error(&e.to_string());
                return StyleinvStatus::Shape;
            }
        };
        match pipe.edit(&x, &dir, scale) {
            Ok(r) => unsafe { image_out(&r.image, out_image, out_len) },
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
