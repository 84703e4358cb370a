//! C ABI over `vtg-core`.
//!
//! Every function returns a [`VtgStatus`]; on failure the message is kept per
//! thread and can be read with [`vtg_last_error`]. Objects are opaque handles
//! created by `*_new`/`*_load`/`vtg_generate` and released with the matching
//! `*_free`. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vtg_core::backbone::Denoiser;
use vtg_core::config::RunConfig;
use vtg_core::{checkpoint, codec, data, metrics, pipeline, transition, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VtgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    Runtime = 7,
    Panic = 8,
}

/// Loaded denoiser.
pub struct VtgModel {
    model: Denoiser,
    hash: String,
}

/// Run configuration.
pub struct VtgConfig {
    cfg: RunConfig,
}

/// Generated frames, 8-bit RGB.
pub struct VtgFrames {
    height: usize,
    width: usize,
    frames: Vec<Vec<u8>>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(clean).ok());
}

fn status_of(e: &Error) -> VtgStatus {
    match e {
        Error::InvalidArgument(_) | Error::TimestepOutOfRange { .. } | Error::UnknownLayer(_) | Error::Dataset { .. } => {
            VtgStatus::InvalidArgument
        }
        Error::ShapeMismatch { .. } => VtgStatus::ShapeMismatch,
        Error::Config(_) => VtgStatus::Config,
        Error::Io(_) | Error::Image(_) | Error::Json(_) => VtgStatus::Io,
        Error::Checkpoint { .. } => VtgStatus::Checkpoint,
        _ => VtgStatus::Runtime,
    }
}

struct Fail(VtgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: VtgStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VtgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            VtgStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            VtgStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(VtgStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(VtgStatus::NullPointer, format!("{what} is null")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(VtgStatus::NullPointer, format!("{what} is null")))
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(fail(VtgStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| fail(VtgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn vtg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vtg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Spherical interpolation of two `len`-vectors into `out`.
///
/// # Safety
/// `a`, `b` and `out` must point to `len` valid doubles.
#[no_mangle]
pub unsafe extern "C" fn vtg_slerp(a: *const f64, b: *const f64, len: usize, lambda: f64, out: *mut f64) -> VtgStatus {
    guard(|| {
        let a = slice(a, len, "a")?;
        let b = slice(b, len, "b")?;
        if out.is_null() {
            return Err(fail(VtgStatus::NullPointer, "out is null"));
        }
        let v = transition::slerp(a, b, lambda)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Gini coefficient of `len` non-negative values.
///
/// # Safety
/// `values` must point to `len` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn vtg_gini(values: *const f64, len: usize, out: *mut f64) -> VtgStatus {
    guard(|| {
        let v = slice(values, len, "values")?;
        *out_ref(out, "out")? = metrics::gini(v)?;
        Ok(())
    })
}

/// Smoothness score from `len` adjacent-frame distances.
///
/// # Safety
/// `distances` must point to `len` doubles and `out` to one.
#[no_mangle]
pub unsafe extern "C" fn vtg_smoothness(distances: *const f64, len: usize, out: *mut f64) -> VtgStatus {
    guard(|| {
        let d = slice(distances, len, "distances")?;
        *out_ref(out, "out")? = metrics::smoothness_from_distances(d)?;
        Ok(())
    })
}

/// Fréchet distance between two embedding sets stored row-major,
/// `na x dim` and `nb x dim`.
///
/// # Safety
/// `a` and `b` must point to `na*dim` and `nb*dim` doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn vtg_fid(a: *const f64, na: usize, b: *const f64, nb: usize, dim: usize, out: *mut f64) -> VtgStatus {
    guard(|| {
        if dim == 0 {
            return Err(fail(VtgStatus::InvalidArgument, "dim must be positive"));
        }
        let rows = |p: *const f64, n: usize, what: &str| -> Result<Vec<Vec<f64>>, Fail> {
            let total = n.checked_mul(dim).ok_or_else(|| fail(VtgStatus::InvalidArgument, "size overflow"))?;
            Ok(slice(p, total, what)?.chunks(dim).map(<[f64]>::to_vec).collect())
        };
        let (ea, eb) = (rows(a, na, "a")?, rows(b, nb, "b")?);
        *out_ref(out, "out")? = metrics::fid_from_embeddings(&ea, &eb)?;
        Ok(())
    })
}

/// Default configuration.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vtg_config_new(out: *mut *mut VtgConfig) -> VtgStatus {
    guard(|| {
        *out_ref(out, "out")? = Box::into_raw(Box::new(VtgConfig { cfg: RunConfig::default() }));
        Ok(())
    })
}

/// Configuration parsed from TOML text.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vtg_config_from_toml(toml: *const c_char, out: *mut *mut VtgConfig) -> VtgStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let cfg = RunConfig::from_toml_str(&string(toml, "toml")?)?;
        cfg.validate()?;
        *out = Box::into_raw(Box::new(VtgConfig { cfg }));
        Ok(())
    })
}

/// Apply one `section.key=value` override.
///
/// # Safety
/// `cfg` must come from this library; `assignment` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtg_config_set(cfg: *mut VtgConfig, assignment: *const c_char) -> VtgStatus {
    guard(|| {
        let c = out_ref(cfg, "cfg")?;
        let a = string(assignment, "assignment")?;
        let mut next = c.cfg.clone();
        next.set(&a)?;
        next.validate()?;
        c.cfg = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vtg_config_free(cfg: *mut VtgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Load a denoiser checkpoint directory.
///
/// # Safety
/// `dir` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vtg_model_load(dir: *const c_char, out: *mut *mut VtgModel) -> VtgStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let dir = PathBuf::from(string(dir, "dir")?);
        let model = checkpoint::load_denoiser(&dir)?;
        let hash = checkpoint::dir_hash(&dir)?;
        *out = Box::into_raw(Box::new(VtgModel { model, hash }));
        Ok(())
    })
}

/// Number of trainable parameters.
///
/// # Safety
/// `model` must come from [`vtg_model_load`] and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn vtg_model_num_params(model: *const VtgModel, out: *mut usize) -> VtgStatus {
    guard(|| {
        let m = handle(model, "model")?;
        *out_ref(out, "out")? = m.model.params.num_elements();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vtg_model_free(model: *mut VtgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Generate a transition for the pair directory `pair_dir`. `lora_cache`
/// may be null when adapters are disabled in `cfg`.
///
/// # Safety
/// Handles must come from this library; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vtg_generate(
    model: *const VtgModel,
    cfg: *const VtgConfig,
    pair_dir: *const c_char,
    lora_cache: *const c_char,
    out: *mut *mut VtgFrames,
) -> VtgStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let m = handle(model, "model")?;
        let cfg = &handle(cfg, "cfg")?.cfg;
        let sample = data::load_pair(&PathBuf::from(string(pair_dir, "pair_dir")?))?;
        let codec = pipeline::codec_for(cfg)?;
        let adapters = if cfg.lora.enabled {
            let cache = PathBuf::from(string(lora_cache, "lora_cache")?);
            let (a1, an, _) = pipeline::ensure_adapters(&sample, &m.model, &codec, cfg, &m.hash, &cache)?;
            Some((a1, an))
        } else {
            None
        };
        let t = pipeline::generate_transition(&sample, &m.model, adapters.as_ref().map(|(a, b)| (a, b)), &codec, cfg)?;
        let (height, width, _) = t.frames[0].dim();
        let frames = t.frames.iter().map(|f| codec::image_to_rgb8(f).into_raw()).collect();
        *out = Box::into_raw(Box::new(VtgFrames { height, width, frames }));
        Ok(())
    })
}

/// Frame count, height and width.
///
/// # Safety
/// `frames` must come from [`vtg_generate`]; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn vtg_frames_shape(frames: *const VtgFrames, count: *mut usize, height: *mut usize, width: *mut usize) -> VtgStatus {
    guard(|| {
        let f = handle(frames, "frames")?;
        *out_ref(count, "count")? = f.frames.len();
        *out_ref(height, "height")? = f.height;
        *out_ref(width, "width")? = f.width;
        Ok(())
    })
}

/// Copy frame `index` as packed RGB8 (`height*width*3` bytes) into `buf`.
///
/// # Safety
/// `frames` must come from [`vtg_generate`]; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vtg_frames_copy_rgb8(frames: *const VtgFrames, index: usize, buf: *mut u8, len: usize) -> VtgStatus {
    guard(|| {
        let f = handle(frames, "frames")?;
        let img = f
            .frames
            .get(index)
            .ok_or_else(|| fail(VtgStatus::InvalidArgument, format!("frame {index} out of range 0..{}", f.frames.len())))?;
        let raw = img.as_slice();
        if len != raw.len() {
            return Err(fail(VtgStatus::ShapeMismatch, format!("buffer holds {len} bytes, frame needs {}", raw.len())));
        }
        if buf.is_null() {
            return Err(fail(VtgStatus::NullPointer, "buf is null"));
        }
        std::slice::from_raw_parts_mut(buf, len).copy_from_slice(raw);
        Ok(())
    })
}

/// # Safety
/// `frames` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn vtg_frames_free(frames: *mut VtgFrames) {
    if !frames.is_null() {
        drop(Box::from_raw(frames));
    }
}
