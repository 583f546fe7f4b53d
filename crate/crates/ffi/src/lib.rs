//! C ABI over `dressing-core`.
//!
//! Every function returns a [`DressStatus`]; on failure the message is
//! available from [`dress_last_error`] on the same thread. Objects cross
//! the boundary as opaque pointers created by `*_load` / `*_new` style
//! functions and released with the matching `*_free`. Panics never unwind
//! into the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dressing_core::diffusion::GuidanceConfig;
use dressing_core::enrich::Enricher;
use dressing_core::eval::texture_sim;
use dressing_core::model::RgbImage;
use dressing_core::pipeline::Generator;
use dressing_core::synth::{
    garment_mask, gen_dataset, render_reference, write_dataset, Color, Garment, GarmentSpec,
    GenOptions, Pattern,
};
use dressing_core::train::{build_model, report_params, AblationMode, LoadedModel, TrainConfig};
use dressing_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DressStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Format = 3,
    Io = 4,
    Runtime = 5,
    Panic = 6,
}

/// Trainability mode for parameter reports.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DressMode {
    Finetuning = 0,
    OnlyLora = 1,
    OnlyAdapter = 2,
    Full = 3,
}

/// Prompt rewriting used by [`dress_sample`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DressEnrich {
    Template = 0,
    Off = 1,
    /// Uses the `endpoint` argument; falls back to the template on failure.
    External = 2,
}

/// A trained model loaded from a checkpoint.
pub struct DressModel(LoadedModel);

/// An RGB image, 8 bits per channel, interleaved rows.
pub struct DressImage(RgbImage);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (DressStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn from_core(e: Error) -> Failure {
    let status = match e {
        Error::Usage(_) | Error::Config(_) | Error::Dimension { .. } => DressStatus::InvalidArgument,
        Error::Format { .. } | Error::Json(_) => DressStatus::Format,
        Error::Io { .. } => DressStatus::Io,
        _ => DressStatus::Runtime,
    };
    (status, e.to_string())
}

/// Runs `f`, records any failure message and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DressStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DressStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            DressStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (DressStatus::NullArgument, format!("`{what}` is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (DressStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live object of type `T`.
unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// # Safety
/// `out` must be null or valid for one pointer write.
unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dress_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dress_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a checkpoint written by the trainer.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dress_model_load(path: *const c_char, out: *mut *mut DressModel) -> DressStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let model = LoadedModel::load(&PathBuf::from(path)).map_err(from_core)?;
        put(out, DressModel(model));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a pointer from [`dress_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dress_model_free(model: *mut DressModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies `width * height * 3` bytes of interleaved RGB into a new image.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dress_image_new(
    width: usize,
    height: usize,
    data: *const u8,
    len: usize,
    out: *mut *mut DressImage,
) -> DressStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let want = width.checked_mul(height).and_then(|n| n.checked_mul(3));
        if want != Some(len) || len == 0 {
            return Err((
                DressStatus::InvalidArgument,
                format!("expected {width}x{height}x3 bytes, got {len}"),
            ));
        }
        let mut img = RgbImage::filled(width, height, [0, 0, 0]);
        img.data.copy_from_slice(std::slice::from_raw_parts(data, len));
        put(out, DressImage(img));
        Ok(())
    })
}

/// Reads a binary PPM file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dress_image_load_ppm(path: *const c_char, out: *mut *mut DressImage) -> DressStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let img = RgbImage::load(&PathBuf::from(path)).map_err(from_core)?;
        put(out, DressImage(img));
        Ok(())
    })
}

/// Writes a binary PPM file.
///
/// # Safety
/// `image` must be a live image and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dress_image_save_ppm(image: *const DressImage, path: *const c_char) -> DressStatus {
    guard(|| {
        let img = ref_arg(image, "image")?;
        let path = str_arg(path, "path")?;
        img.0.save(&PathBuf::from(path)).map_err(from_core)
    })
}

/// # Safety
/// `image` must be null or a live image.
#[no_mangle]
pub unsafe extern "C" fn dress_image_width(image: *const DressImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.width)
}

/// # Safety
/// `image` must be null or a live image.
#[no_mangle]
pub unsafe extern "C" fn dress_image_height(image: *const DressImage) -> usize {
    image.as_ref().map_or(0, |i| i.0.height)
}

/// Interleaved RGB bytes (`width * height * 3`), owned by the image.
///
/// # Safety
/// `image` must be null or a live image.
#[no_mangle]
pub unsafe extern "C" fn dress_image_data(image: *const DressImage) -> *const u8 {
    image.as_ref().map_or(std::ptr::null(), |i| i.0.data.as_ptr())
}

/// # Safety
/// `image` must be null or a pointer from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dress_image_free(image: *mut DressImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

/// Renders a reference garment on the neutral ground. `pattern` is one of
/// `solid`, `stripes`, `checker`, `dots`; colors are palette names.
///
/// # Safety
/// String arguments must be NUL-terminated and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dress_render_reference(
    pattern: *const c_char,
    fg: *const c_char,
    bg: *const c_char,
    scale: usize,
    out: *mut *mut DressImage,
) -> DressStatus {
    guard(|| {
        let bad = |m: String| (DressStatus::InvalidArgument, m);
        let p = str_arg(pattern, "pattern")?;
        let f = str_arg(fg, "fg")?;
        let b = str_arg(bg, "bg")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = GarmentSpec {
            pattern: Pattern::from_name(p).ok_or_else(|| bad(format!("unknown pattern `{p}`")))?,
            color_fg: Color::from_name(f).ok_or_else(|| bad(format!("unknown color `{f}`")))?,
            color_bg: Color::from_name(b).ok_or_else(|| bad(format!("unknown color `{b}`")))?,
            scale,
        };
        spec.validate().map_err(from_core)?;
        put(out, DressImage(render_reference(&Garment::Pattern(spec))));
        Ok(())
    })
}

/// Generates one image. `endpoint` is read only with
/// [`DressEnrich::External`].
///
/// # Safety
/// `model` and `reference` must be live objects, `prompt` a NUL-terminated
/// string, `endpoint` null or NUL-terminated, and `out` valid for a write.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn dress_sample(
    model: *const DressModel,
    reference: *const DressImage,
    prompt: *const c_char,
    seed: u64,
    steps: usize,
    guidance: f64,
    enrich: DressEnrich,
    endpoint: *const c_char,
    out: *mut *mut DressImage,
) -> DressStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let reference = ref_arg(reference, "reference")?;
        let prompt = str_arg(prompt, "prompt")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if steps == 0 || !guidance.is_finite() {
            return Err((DressStatus::InvalidArgument, "steps must be positive and guidance finite".into()));
        }
        let enricher = match enrich {
            DressEnrich::Template => Enricher::Template,
            DressEnrich::Off => Enricher::Off,
            DressEnrich::External => Enricher::External { endpoint: str_arg(endpoint, "endpoint")?.to_string() },
        };
        let generator = Generator::new(&model.0);
        let g = GuidanceConfig { w: guidance, num_steps: steps, ..GuidanceConfig::default() };
        let (img, _) = generator
            .sample(&reference.0, prompt, &enricher, seed, &g)
            .map_err(from_core)?;
        put(out, DressImage(img));
        Ok(())
    })
}

/// Texture similarity of the garment region of two 32×32 images.
///
/// # Safety
/// Both images must be live and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dress_texture_sim(
    generated: *const DressImage,
    reference: *const DressImage,
    out: *mut f64,
) -> DressStatus {
    guard(|| {
        let a = ref_arg(generated, "generated")?;
        let b = ref_arg(reference, "reference")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = texture_sim(&a.0, &garment_mask(), &b.0).map_err(from_core)?;
        Ok(())
    })
}

/// Writes a synthetic dataset directory.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dress_gen_data(n: usize, seed: u64, out_dir: *const c_char) -> DressStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(out_dir, "out_dir")?);
        if n == 0 {
            return Err((DressStatus::InvalidArgument, "n must be positive".into()));
        }
        let ds = gen_dataset(n, seed, &GenOptions::default()).map_err(from_core)?;
        std::fs::create_dir_all(&dir).map_err(|e| (DressStatus::Io, format!("{}: {e}", dir.display())))?;
        write_dataset(&ds, &dir).map_err(from_core)
    })
}

/// Parameter report for the default architecture as JSON. Release the
/// string with [`dress_string_free`].
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dress_param_report_json(mode: DressMode, out: *mut *mut c_char) -> DressStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match mode {
            DressMode::Finetuning => AblationMode::Finetuning,
            DressMode::OnlyLora => AblationMode::OnlyLora,
            DressMode::OnlyAdapter => AblationMode::OnlyAdapter,
            DressMode::Full => AblationMode::Full,
        };
        let (unet, store) = build_model(&TrainConfig::default(), 0).map_err(from_core)?;
        let json = report_params(&unet, &store, mode).map_err(from_core)?.to_json();
        *out = CString::new(json).expect("json has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dress_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
