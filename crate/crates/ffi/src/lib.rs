//! C ABI over the capsdense engine.
//!
//! Models are opaque `CdModel` handles created by `cd_model_from_preset` or
//! `cd_model_load` and released with `cd_model_free`. Every fallible call
//! returns a `CdStatus`; on failure `cd_last_error_message` describes the
//! most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use capsdense::checkpoint::{self, Checkpoint};
use capsdense::model::{Model, ModelSpec};
use capsdense::optim::AdamState;
use capsdense::{capsule, Error, Tensor};

/// Result codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Format = 4,
    Integrity = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct CdModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> CdStatus {
    match e {
        Error::Dimension(_) | Error::Contract(_) => CdStatus::InvalidArgument,
        Error::Config(_) | Error::Json(_) => CdStatus::Config,
        Error::Format { .. } => CdStatus::Format,
        Error::Integrity(_) => CdStatus::Integrity,
        Error::Numerical(_) => CdStatus::Numerical,
        Error::Io(_) => CdStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (CdStatus, String)>) -> CdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CdStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CdStatus::Panic
        }
    }
}

fn lift<T>(r: capsdense::Result<T>) -> Result<T, (CdStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CdStatus, String) {
    (CdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (CdStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn model_ref<'a>(m: *const CdModel) -> Result<&'a CdModel, (CdStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized model from a named preset.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_from_preset(name: *const c_char, seed: u64, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let name = c_str(name, "name")?;
        let spec = lift(ModelSpec::preset(name))?;
        let model = lift(Model::build(spec, seed))?;
        *out = Box::into_raw(Box::new(CdModel { model }));
        Ok(())
    })
}

/// Loads a checkpoint written by the CLI (with its `.json` spec sidecar).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_load(path: *const c_char, out: *mut *mut CdModel) -> CdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = c_str(path, "path")?;
        let (spec, ck) = lift(checkpoint::load_with_spec(Path::new(path)))?;
        *out = Box::into_raw(Box::new(CdModel {
            model: Model { spec, params: ck.params },
        }));
        Ok(())
    })
}

/// Writes the model as a checkpoint (fresh optimizer state) plus spec sidecar.
///
/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cd_model_save(model: *const CdModel, path: *const c_char) -> CdStatus {
    guard(|| {
        let m = &model_ref(model)?.model;
        let path = c_str(path, "path")?;
        let ck = Checkpoint {
            params: m.params.clone(),
            adam: AdamState::new(&m.params),
            epoch: 0,
        };
        lift(checkpoint::save(Path::new(path), &ck, &m.spec))
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cd_model_free(model: *mut CdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total number of scalar parameters.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_param_count(model: *const CdModel, out: *mut u64) -> CdStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.model.params.count() as u64;
        Ok(())
    })
}

/// Input `(channels, height, width)`, number of classes and the width of
/// the concatenated class capsule.
///
/// # Safety
/// `model` must come from this library; every out pointer must be writable.
#[no_mangle]
pub unsafe extern "C" fn cd_model_shape(
    model: *const CdModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    num_classes: *mut usize,
    capsule_dim: *mut usize,
) -> CdStatus {
    guard(|| {
        let spec = &model_ref(model)?.model.spec;
        if channels.is_null() || height.is_null() || width.is_null() || num_classes.is_null() || capsule_dim.is_null() {
            return Err(null("output"));
        }
        let plan = lift(spec.plan())?;
        *channels = spec.input.channels;
        *height = spec.input.height;
        *width = spec.input.width;
        *num_classes = spec.num_classes;
        *capsule_dim = plan.class_dim;
        Ok(())
    })
}

/// Classifies `n` images laid out as `[n, C, H, W]` floats. Writes `n`
/// predicted classes to `labels` and, when `lengths` is not NULL, the
/// `n * K` class-capsule lengths.
///
/// # Safety
/// `images` must hold `n*C*H*W` floats, `labels` room for `n` values and
/// `lengths` (if given) room for `n*K` floats.
#[no_mangle]
pub unsafe extern "C" fn cd_model_predict(
    model: *const CdModel,
    images: *const f32,
    n: usize,
    labels: *mut u32,
    lengths: *mut f32,
) -> CdStatus {
    guard(|| {
        let m = &model_ref(model)?.model;
        if images.is_null() {
            return Err(null("images"));
        }
        if labels.is_null() {
            return Err(null("labels"));
        }
        if n == 0 {
            return Err((CdStatus::InvalidArgument, "n must be at least 1".into()));
        }
        let s = m.spec.input;
        let len = n * s.pixels();
        let data = std::slice::from_raw_parts(images, len).to_vec();
        let x = lift(Tensor::new(&[n, s.channels, s.height, s.width], data))?;
        let (caps, predicted) = lift(m.infer(&x))?;
        for (i, p) in predicted.iter().enumerate() {
            *labels.add(i) = *p as u32;
        }
        if !lengths.is_null() {
            let norms = lift(capsule::capsule_logits(&caps))?;
            ptr::copy_nonoverlapping(norms.data().as_ptr(), lengths, norms.len());
        }
        Ok(())
    })
}

/// Squashes `count` vectors of length `dim` from `input` into `output`
/// (which may alias `input`).
///
/// # Safety
/// `input` and `output` must each hold `count*dim` floats.
#[no_mangle]
pub unsafe extern "C" fn cd_squash(input: *const f32, count: usize, dim: usize, output: *mut f32) -> CdStatus {
    guard(|| {
        if input.is_null() || output.is_null() {
            return Err(null("buffer"));
        }
        if count == 0 || dim == 0 {
            return Err((CdStatus::InvalidArgument, "count and dim must be positive".into()));
        }
        let data = std::slice::from_raw_parts(input, count * dim).to_vec();
        let t = lift(Tensor::new(&[count, dim], data))?;
        let v = capsule::squash(&t);
        ptr::copy(v.data().as_ptr(), output, count * dim);
        Ok(())
    })
}
