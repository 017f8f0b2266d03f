//! C ABI for the editing model and the dataset filter helpers.
//!
//! Handles are opaque and owned by the caller once returned; free them with
//! the matching `*_free`. Every call returns an [`SbStatus`]; on failure the
//! message is available from [`sb_last_error`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use stylebooth::backends::{BackendConfig, Backends, ToyConfig};
use stylebooth::editing::{EditingModel, GuidanceConfig, ModelConfig};
use stylebooth::image::Image;
use stylebooth::instruction::{bind, parse_template, ExemplarRef, ScaleWeights};
use stylebooth::refinery::{expand_prompt, FilterThresholds, StyleSpec, Verdict};
use stylebooth::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Caller input was rejected (parse, arity, configuration).
    Usage = 3,
    NotFound = 4,
    /// Backend, I/O or numeric failure.
    Runtime = 5,
    Panic = 6,
}

/// Filter verdicts.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbVerdict {
    Pass = 0,
    TooSimilar = 1,
    TooDifferent = 2,
    Fail = 3,
}

/// Editing model with its sampling settings.
pub struct SbModel {
    model: EditingModel,
    guidance: GuidanceConfig,
    steps: usize,
}

/// RGB image, planar, values in `[0, 1]`.
pub struct SbImage {
    image: Image,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> SbStatus {
    match e {
        Error::NotFound(_) => SbStatus::NotFound,
        e if e.is_usage() => SbStatus::Usage,
        _ => SbStatus::Runtime,
    }
}

enum Failure {
    Status(SbStatus, String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SbStatus::Ok
        }
        Ok(Err(Failure::Status(s, m))) => {
            set_error(&m);
            s
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("panic inside stylebooth");
            SbStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure::Status(SbStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Status(SbStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, n: usize, name: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(name));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|s| str_arg(*s, name).map(str::to_string))
        .collect()
}

unsafe fn write_out<T>(out: *mut *mut T, value: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(name));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message of the last failed call on this thread; empty after success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn toy_backends(max_length: usize) -> Backends {
    Backends::toy(&ToyConfig {
        max_length,
        ..ToyConfig::default()
    })
}

/// Freshly initialised model on toy backends.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_model_new_toy(seed: u64, steps: usize, out: *mut *mut SbModel) -> SbStatus {
    guard(|| {
        let backends = toy_backends(ToyConfig::default().max_length);
        let model = EditingModel::new(ModelConfig::for_backends(&backends, seed), backends)?;
        write_out(
            out,
            SbModel {
                model,
                guidance: GuidanceConfig::default(),
                steps,
            },
            "out",
        )
    })
}

/// Loads a checkpoint; backends follow `STYLEBOOTH_BACKEND` / `STYLEBOOTH_WEIGHTS`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_model_load(path: *const c_char, steps: usize, out: *mut *mut SbModel) -> SbStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let backends = Backends::from_config(&BackendConfig::default().with_env()?)?;
        let model = EditingModel::load(Path::new(path), backends)?;
        write_out(
            out,
            SbModel {
                model,
                guidance: GuidanceConfig::default(),
                steps,
            },
            "out",
        )
    })
}

/// Sets the image and text guidance scales used by [`sb_edit`].
///
/// # Safety
/// `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn sb_model_set_guidance(model: *mut SbModel, image_scale: f64, text_scale: f64) -> SbStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let g = GuidanceConfig {
            image_scale,
            text_scale,
            ..m.guidance.clone()
        };
        g.validate()?;
        m.guidance = g;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sb_model_free(model: *mut SbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies a planar `3 × height × width` float buffer into a new image.
///
/// # Safety
/// `data` must hold `3 * width * height` floats.
#[no_mangle]
pub unsafe extern "C" fn sb_image_from_planar(
    width: usize,
    height: usize,
    data: *const f32,
    out: *mut *mut SbImage,
) -> SbStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let n = 3usize
            .checked_mul(width)
            .and_then(|v| v.checked_mul(height))
            .ok_or_else(|| Failure::Status(SbStatus::Usage, "image too large".into()))?;
        let image = Image::from_planar(width, height, std::slice::from_raw_parts(data, n).to_vec())?;
        write_out(out, SbImage { image }, "out")
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_image_load(path: *const c_char, out: *mut *mut SbImage) -> SbStatus {
    guard(|| {
        let image = Image::load(Path::new(str_arg(path, "path")?))?;
        write_out(out, SbImage { image }, "out")
    })
}

/// # Safety
/// `image` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sb_image_save_png(image: *const SbImage, path: *const c_char) -> SbStatus {
    guard(|| {
        let img = image.as_ref().ok_or_else(|| null("image"))?;
        img.image.save_png(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Width in pixels, 0 for null.
///
/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sb_image_width(image: *const SbImage) -> usize {
    image.as_ref().map_or(0, |i| i.image.width())
}

/// Height in pixels, 0 for null.
///
/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sb_image_height(image: *const SbImage) -> usize {
    image.as_ref().map_or(0, |i| i.image.height())
}

/// Copies planar pixel data into `buf` (`3 * width * height` floats).
///
/// # Safety
/// `buf` must have room for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn sb_image_read(image: *const SbImage, buf: *mut f32, len: usize) -> SbStatus {
    guard(|| {
        let img = image.as_ref().ok_or_else(|| null("image"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = img.image.data();
        if len < data.len() {
            return Err(Failure::Status(
                SbStatus::Usage,
                format!("buffer holds {len} floats, image needs {}", data.len()),
            ));
        }
        std::ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sb_image_free(image: *mut SbImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Edits `image` following `instruction`. `styles` bind `<style>` slots,
/// `exemplar_paths` bind `<image>` slots and `alphas` (may be empty) weight
/// every slot in order.
///
/// # Safety
/// Arrays must hold the stated number of elements; strings must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sb_edit(
    model: *const SbModel,
    image: *const SbImage,
    instruction: *const c_char,
    styles: *const *const c_char,
    n_styles: usize,
    exemplar_paths: *const *const c_char,
    n_exemplars: usize,
    alphas: *const f32,
    n_alphas: usize,
    seed: u64,
    out: *mut *mut SbImage,
) -> SbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let img = image.as_ref().ok_or_else(|| null("image"))?;
        let text = str_arg(instruction, "instruction")?;
        let styles = str_array(styles, n_styles, "styles")?;
        let exemplars = str_array(exemplar_paths, n_exemplars, "exemplar_paths")?
            .into_iter()
            .enumerate()
            .map(|(i, p)| ExemplarRef::from_path(format!("ex{i}"), p))
            .collect();
        let alphas = if n_alphas == 0 {
            Vec::new()
        } else if alphas.is_null() {
            return Err(null("alphas"));
        } else {
            std::slice::from_raw_parts(alphas, n_alphas).to_vec()
        };
        let bound = bind(parse_template(text)?, styles, exemplars, ScaleWeights::new(alphas)?)?;
        let edited = m.model.sample_edit(&img.image, &bound, &m.guidance, m.steps, seed)?;
        write_out(out, SbImage { image: edited }, "out")
    })
}

/// Expands a style prompt format; free the result with [`sb_string_free`].
///
/// # Safety
/// Inputs must be NUL-terminated; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_expand_prompt(format: *const c_char, prompt: *const c_char, out: *mut *mut c_char) -> SbStatus {
    guard(|| {
        let spec = StyleSpec::new("ffi", str_arg(format, "format")?)?;
        let s = expand_prompt(&spec, str_arg(prompt, "prompt")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = CString::new(s)
            .map_err(|_| Failure::Status(SbStatus::Usage, "prompt contains NUL".into()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn sb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Filter verdict for one similarity; bounds are inclusive.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_filter_verdict(similarity: f64, lower: f64, upper: f64, out: *mut SbVerdict) -> SbStatus {
    guard(|| {
        let t = FilterThresholds::new(lower, upper)?;
        let v = match t.verdict(similarity) {
            Verdict::Pass => SbVerdict::Pass,
            Verdict::TooSimilar => SbVerdict::TooSimilar,
            Verdict::TooDifferent => SbVerdict::TooDifferent,
            Verdict::Fail => SbVerdict::Fail,
        };
        *out.as_mut().ok_or_else(|| null("out"))? = v;
        Ok(())
    })
}

/// `100 · passed / total`, unrounded.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_usability_percent(passed: usize, total: usize, out: *mut f64) -> SbStatus {
    guard(|| {
        if total == 0 || passed > total {
            return Err(Failure::Status(SbStatus::Usage, format!("invalid counts {passed}/{total}")));
        }
        *out.as_mut().ok_or_else(|| null("out"))? = 100.0 * passed as f64 / total as f64;
        Ok(())
    })
}
