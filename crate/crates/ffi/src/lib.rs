//! C ABI over the frame-interpolation core.
//!
//! Handles are opaque pointers owned by the library; every fallible call
//! returns an `IfStatus` and stores a human-readable message retrievable
//! via `if_last_error` (thread-local).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use interframe::io::Checkpoint;
use interframe::model::{Model, ModelConfig};
use interframe::tensor::Tensor;
use interframe::Error;

/// Status codes shared with the CLI: 0 success, 1 usage (bad arguments),
/// 2 data/configuration error, 3 numerical failure.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum IfStatus {
    Ok = 0,
    Usage = 1,
    Data = 2,
    Numerical = 3,
}

/// Opaque model handle.
pub struct IfModel {
    inner: Model<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> IfStatus {
    match e {
        Error::NonFinite(_) => IfStatus::Numerical,
        _ => IfStatus::Data,
    }
}

fn guard<F: FnOnce() -> Result<(), (IfStatus, String)>>(f: F) -> IfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => IfStatus::Ok,
        Ok(Err((code, msg))) => {
            set_error(&msg);
            code
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "internal panic".into());
            set_error(&msg);
            IfStatus::Numerical
        }
    }
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, (IfStatus, String)> {
    if p.is_null() {
        return Err((IfStatus::Usage, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (IfStatus::Usage, "string argument is not valid UTF-8".into()))
}

/// Message for the most recent failure on this thread. Valid until the
/// next failing call; never NULL.
#[no_mangle]
pub extern "C" fn if_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn if_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a model from a checkpoint file. Returns NULL on failure (see
/// `if_last_error`).
///
/// # Safety
/// `ckpt_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn if_model_load(ckpt_path: *const c_char) -> *mut IfModel {
    let mut out: *mut IfModel = ptr::null_mut();
    guard(|| {
        let path = cstr(ckpt_path)?;
        let ck = Checkpoint::read(path).map_err(|e| (status_of(&e), e.to_string()))?;
        let model: Model<f32> = ck.restore_model().map_err(|e| (status_of(&e), e.to_string()))?;
        out = Box::into_raw(Box::new(IfModel { inner: model }));
        Ok(())
    });
    out
}

/// Create a freshly initialized model from a JSON config (`"{}"` for
/// defaults). Returns NULL on failure.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn if_model_create(config_json: *const c_char, seed: u64) -> *mut IfModel {
    let mut out: *mut IfModel = ptr::null_mut();
    guard(|| {
        let json = cstr(config_json)?;
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| (IfStatus::Data, format!("config: {e}")))?;
        let model =
            Model::<f32>::new(cfg, seed).map_err(|e| (status_of(&e), e.to_string()))?;
        out = Box::into_raw(Box::new(IfModel { inner: model }));
        Ok(())
    });
    out
}

/// Release a model handle. NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by this library, released at most once.
#[no_mangle]
pub unsafe extern "C" fn if_model_free(model: *mut IfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of f32 values in one frame buffer for the given extents.
#[no_mangle]
pub extern "C" fn if_frame_len(height: usize, width: usize) -> usize {
    3 * height * width
}

/// Interpolate between two frames at time `t` in (0,1).
///
/// Frames are planar RGB (`3*height*width` f32 values in [0,1], channel
/// then row-major); extents must be multiples of 16. The result is written
/// to `out_frame`, which must hold `if_frame_len(height, width)` values.
///
/// # Safety
/// `model` must be a live handle; the three frame pointers must reference
/// buffers of `if_frame_len(height, width)` f32 values.
#[no_mangle]
pub unsafe extern "C" fn if_interpolate(
    model: *const IfModel,
    frame0: *const f32,
    frame1: *const f32,
    height: usize,
    width: usize,
    t: f64,
    out_frame: *mut f32,
) -> IfStatus {
    guard(|| {
        if model.is_null() || frame0.is_null() || frame1.is_null() || out_frame.is_null() {
            return Err((IfStatus::Usage, "null argument".into()));
        }
        let len = 3 * height * width;
        let shape = [1usize, 3, height, width];
        let i0 = Tensor::<f32>::new(std::slice::from_raw_parts(frame0, len).to_vec(), &shape);
        let i1 = Tensor::<f32>::new(std::slice::from_raw_parts(frame1, len).to_vec(), &shape);
        let result = (*model)
            .inner
            .interpolate(&i0, &i1, t)
            .map_err(|e| (status_of(&e), e.to_string()))?;
        std::slice::from_raw_parts_mut(out_frame, len)
            .copy_from_slice(result.synth.image.data());
        Ok(())
    })
}

/// Peak signal-to-noise ratio between two equal-length buffers, in dB
/// (capped at 99).
///
/// # Safety
/// `a` and `b` must reference `len` f32 values; `out_db` must be writable.
#[no_mangle]
pub unsafe extern "C" fn if_psnr(
    a: *const f32,
    b: *const f32,
    len: usize,
    max_val: f64,
    out_db: *mut f64,
) -> IfStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out_db.is_null() || len == 0 {
            return Err((IfStatus::Usage, "null argument or empty buffer".into()));
        }
        let ta = Tensor::<f32>::new(std::slice::from_raw_parts(a, len).to_vec(), &[len]);
        let tb = Tensor::<f32>::new(std::slice::from_raw_parts(b, len).to_vec(), &[len]);
        let v = interframe::metrics::psnr(&ta, &tb, max_val)
            .map_err(|e| (status_of(&e), e.to_string()))?;
        *out_db = v;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn create_interpolate_free() {
        let cfg = c(r#"{"base_channels":4,"blocks_per_scale":1,"d_state":2}"#);
        let model = unsafe { if_model_create(cfg.as_ptr(), 7) };
        assert!(!model.is_null());
        let (h, w) = (32, 32);
        let len = if_frame_len(h, w);
        let f0 = vec![0.25f32; len];
        let f1 = vec![0.75f32; len];
        let mut out = vec![0.0f32; len];
        let status = unsafe {
            if_interpolate(model, f0.as_ptr(), f1.as_ptr(), h, w, 0.5, out.as_mut_ptr())
        };
        assert!(status == IfStatus::Ok);
        assert!(out.iter().all(|v| v.is_finite()));
        unsafe { if_model_free(model) };
    }

    #[test]
    fn bad_inputs_set_error_and_codes() {
        let model = unsafe { if_model_create(std::ptr::null(), 0) };
        assert!(model.is_null());
        let msg = unsafe { CStr::from_ptr(if_last_error()) }.to_str().unwrap();
        assert!(msg.contains("null"));

        let cfg = c("{not json");
        assert!(unsafe { if_model_create(cfg.as_ptr(), 0) }.is_null());
        let msg = unsafe { CStr::from_ptr(if_last_error()) }.to_str().unwrap();
        assert!(msg.contains("config"));

        let mut out = 0.0f64;
        let st = unsafe { if_psnr(std::ptr::null(), std::ptr::null(), 0, 1.0, &mut out) };
        assert!(st == IfStatus::Usage);

        let missing = c("/nonexistent/model.ckpt");
        assert!(unsafe { if_model_load(missing.as_ptr()) }.is_null());
    }

    #[test]
    fn odd_extents_rejected_not_fatal() {
        let cfg = c(r#"{"base_channels":4,"blocks_per_scale":1,"d_state":2}"#);
        let model = unsafe { if_model_create(cfg.as_ptr(), 7) };
        let (h, w) = (20, 20); // not multiples of 16
        let len = if_frame_len(h, w);
        let f = vec![0.5f32; len];
        let mut out = vec![0.0f32; len];
        let st = unsafe {
            if_interpolate(model, f.as_ptr(), f.as_ptr(), h, w, 0.5, out.as_mut_ptr())
        };
        assert!(st == IfStatus::Data);
        unsafe { if_model_free(model) };
    }

    #[test]
    fn psnr_matches_core() {
        let a = vec![0.5f32; 100];
        let b = vec![0.6f32; 100];
        let mut out = 0.0f64;
        let st = unsafe { if_psnr(a.as_ptr(), b.as_ptr(), 100, 1.0, &mut out) };
        assert!(st == IfStatus::Ok);
        assert!((out - 20.0).abs() < 1e-4);
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(if_version()) }.to_str().unwrap();
        assert!(!v.is_empty());
    }
}
