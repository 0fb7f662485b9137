//! C ABI for the engine.
//!
//! Every function returns a [`LpStatus`]. On failure the message of the
//! last error on the calling thread is available from
//! [`lp_last_error_message`]. Handles are opaque; each has a matching
//! `*_free` that accepts NULL.
//!
//! ```c
//! LpEngine *engine; LpLayout *layout; LpScene *scene;
//! lp_engine_new(NULL, &engine);
//! lp_layout_load_file("layout.json", &layout);
//! if (lp_engine_run_job(engine, layout, "runs/job1", &scene) != LP_STATUS_OK)
//!     fprintf(stderr, "%s\n", lp_last_error_message());
//! ```

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use layoutpaint::config::EngineConfig;
use layoutpaint::engine::{Engine, RunOutput};
use layoutpaint::error::PipelineError;
use layoutpaint::layout::{load_layout, load_layout_file, Layout};

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The layout or config was rejected.
    Validation = 3,
    NotFound = 4,
    /// A backend or pipeline stage failed.
    Pipeline = 5,
    Io = 6,
    /// The output buffer is smaller than required.
    BufferTooSmall = 7,
    /// A Rust panic was caught at the boundary.
    Internal = 8,
}

/// Engine with its configuration and worker pool.
pub struct LpEngine {
    engine: Engine,
}

/// A validated layout.
pub struct LpLayout {
    layout: Layout,
}

/// Result of a full run: the composed image plus the per-object images.
pub struct LpScene {
    out: RunOutput,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &PipelineError) -> LpStatus {
    if e.is_validation() {
        LpStatus::Validation
    } else {
        match e {
            PipelineError::NotFound(_) => LpStatus::NotFound,
            PipelineError::Io { .. } => LpStatus::Io,
            _ => LpStatus::Pipeline,
        }
    }
}

struct Fail(LpStatus, String);

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        Fail(status_of(&e), format!("{}: {e}", e.code()))
    }
}

/// Runs `f`, recording the error message and catching panics.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            LpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            LpStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(LpStatus::NullArgument, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LpStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, name: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, name).map(Some)
    }
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(LpStatus::NullArgument, format!("{name} is NULL")))
}

fn out_arg<T>(p: *mut *mut T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(LpStatus::NullArgument, format!("{name} is NULL")));
    }
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn lp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Creates an engine from a TOML config document; NULL means defaults.
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_new(config_toml: *const c_char, out: *mut *mut LpEngine) -> LpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let text = opt_str_arg(config_toml, "config_toml")?;
        let config = EngineConfig::from_toml_str(text.unwrap_or(""), &[])?;
        let engine = Engine::new(config)?;
        *out = Box::into_raw(Box::new(LpEngine { engine }));
        Ok(())
    })
}

/// # Safety
/// `engine` is NULL or a handle from [`lp_engine_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_free(engine: *mut LpEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Parses a layout document. Relative mask paths resolve against
/// `base_dir` (NULL: the working directory).
///
/// # Safety
/// String arguments are NULL or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lp_layout_from_json(
    json: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut LpLayout,
) -> LpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let json = str_arg(json, "json")?;
        let base = opt_str_arg(base_dir, "base_dir")?.map(Path::new);
        let layout = load_layout(json.as_bytes(), base).map_err(PipelineError::from)?;
        *out = Box::into_raw(Box::new(LpLayout { layout }));
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lp_layout_load_file(path: *const c_char, out: *mut *mut LpLayout) -> LpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let layout = load_layout_file(Path::new(path)).map_err(PipelineError::from)?;
        *out = Box::into_raw(Box::new(LpLayout { layout }));
        Ok(())
    })
}

/// Number of objects, or 0 for NULL.
///
/// # Safety
/// `layout` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_layout_object_count(layout: *const LpLayout) -> usize {
    layout.as_ref().map_or(0, |l| l.layout.objects.len())
}

/// # Safety
/// `layout` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_layout_free(layout: *mut LpLayout) {
    if !layout.is_null() {
        drop(Box::from_raw(layout));
    }
}

/// `out` must have passed `out_arg`.
unsafe fn finish(out: *mut *mut LpScene, run: RunOutput) {
    *out = Box::into_raw(Box::new(LpScene { out: run }));
}

/// Runs both stages in memory.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_run(
    engine: *const LpEngine,
    layout: *const LpLayout,
    out: *mut *mut LpScene,
) -> LpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let e = ref_arg(engine, "engine")?;
        let l = ref_arg(layout, "layout")?;
        finish(out, e.engine.run(&l.layout, &|_| {})?);
        Ok(())
    })
}

/// Runs both stages and writes a job directory.
///
/// # Safety
/// Handles are live; `job_dir` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_run_job(
    engine: *const LpEngine,
    layout: *const LpLayout,
    job_dir: *const c_char,
    out: *mut *mut LpScene,
) -> LpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let e = ref_arg(engine, "engine")?;
        let l = ref_arg(layout, "layout")?;
        let dir = PathBuf::from(str_arg(job_dir, "job_dir")?);
        finish(out, e.engine.run_job(&l.layout, &dir, None)?);
        Ok(())
    })
}

/// Regenerates `object_id` of the job in `from_dir` into `job_dir`. The
/// new seed is used when `seed` is non-NULL. The other objects are copied.
///
/// # Safety
/// `engine` is live; strings are NUL-terminated; `seed` is NULL or
/// readable; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lp_engine_regenerate_job(
    engine: *const LpEngine,
    from_dir: *const c_char,
    object_id: *const c_char,
    seed: *const u64,
    job_dir: *const c_char,
    out: *mut *mut LpScene,
) -> LpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let e = ref_arg(engine, "engine")?;
        let from = PathBuf::from(str_arg(from_dir, "from_dir")?);
        let oid = str_arg(object_id, "object_id")?;
        let dir = PathBuf::from(str_arg(job_dir, "job_dir")?);
        let seed = seed.as_ref().copied();
        finish(out, e.engine.regenerate_job(&from, oid, seed, &dir, None)?);
        Ok(())
    })
}

/// Canvas size of the scene.
///
/// # Safety
/// `scene` is live; `height` and `width` are writable.
#[no_mangle]
pub unsafe extern "C" fn lp_scene_dims(scene: *const LpScene, height: *mut usize, width: *mut usize) -> LpStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        if height.is_null() || width.is_null() {
            return Err(Fail(LpStatus::NullArgument, "height/width is NULL".into()));
        }
        let (h, w) = s.out.scene.image.dims();
        *height = h;
        *width = w;
        Ok(())
    })
}

/// Number of objects in the scene.
///
/// # Safety
/// `scene` is NULL or live.
#[no_mangle]
pub unsafe extern "C" fn lp_scene_object_count(scene: *const LpScene) -> usize {
    scene.as_ref().map_or(0, |s| s.out.objects.len())
}

unsafe fn copy_rgb(image: &layoutpaint::tensor::Image, buf: *mut u8, len: usize) -> Result<(), Fail> {
    let rgb = image.to_rgb8();
    let raw = rgb.as_raw();
    if buf.is_null() {
        return Err(Fail(LpStatus::NullArgument, "buf is NULL".into()));
    }
    if len < raw.len() {
        return Err(Fail(
            LpStatus::BufferTooSmall,
            format!("buffer holds {len} bytes, need {}", raw.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(raw.as_ptr(), buf, raw.len());
    Ok(())
}

/// Copies the composed image as row-major 8-bit RGB (`height·width·3`
/// bytes).
///
/// # Safety
/// `scene` is live; `buf` has room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lp_scene_rgb8(scene: *const LpScene, buf: *mut u8, len: usize) -> LpStatus {
    guard(|| copy_rgb(&ref_arg(scene, "scene")?.out.scene.image, buf, len))
}

/// Copies the stage-1 image of object `index` (layout order).
///
/// # Safety
/// `scene` is live; `buf` has room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn lp_scene_object_rgb8(
    scene: *const LpScene,
    index: usize,
    buf: *mut u8,
    len: usize,
) -> LpStatus {
    guard(|| {
        let s = ref_arg(scene, "scene")?;
        let obj = s
            .out
            .objects
            .get(index)
            .ok_or_else(|| Fail(LpStatus::NotFound, format!("no object at index {index}")))?;
        copy_rgb(&obj.image, buf, len)
    })
}

/// # Safety
/// `scene` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lp_scene_free(scene: *mut LpScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}
