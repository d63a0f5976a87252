//! C ABI for embedding the weather recognizer in non-Rust hosts.
//!
//! The surface is deliberately small: load a checkpoint into an opaque
//! [`WxctModel`] handle, query its label vocabulary, and run single-image
//! inference from either a raw RGB buffer or a PNG file. Every fallible
//! entry point returns a [`WxctStatus`] code and records a human-readable
//! message retrievable through [`wxct_last_error_message`].
//!
//! Conventions:
//!
//! * Handles are created by `wxct_model_load` and released by
//!   `wxct_model_free`; no other function takes ownership.
//! * Out-parameters are written only when the call returns `WXCT_STATUS_OK`.
//! * Strings returned by the library are NUL-terminated, borrowed, and must
//!   not be freed by the caller. Label names stay valid for the lifetime of
//!   the handle; the error message stays valid until the next call that
//!   fails on the same thread.
//! * No function panics across the boundary: unexpected panics are caught
//!   and reported as `WXCT_STATUS_PANIC`.
//!
//! The companion header `include/wxct.h` is generated from this file by
//! cbindgen at build time.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use libc::{c_char, c_double, size_t};
use ndarray::Axis;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wxct::backbone::image_to_chw;
use wxct::data::{prepare_sample, SampleMode};
use wxct::image::ImagePlane;
use wxct::labels::LabelStateVector;
use wxct::model::{load_model, Model, ModelConfig};
use wxct::nn::ParamStore;
use wxct::WxError;

/// Result codes shared by every fallible function in this library.
///
/// The non-zero values mirror the process exit codes of the `wxct` CLI so
/// that host applications can map failures uniformly across both entry
/// points.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WxctStatus {
    /// The call succeeded; out-parameters are valid.
    Ok = 0,
    /// An internal error that fits no more specific category.
    Error = 1,
    /// A configuration problem (malformed checkpoint metadata, bad model
    /// hyperparameters).
    Config = 2,
    /// A data problem (unreadable file, undecodable image, vocabulary
    /// mismatch).
    Data = 3,
    /// A numerical failure (non-finite values in the forward pass).
    Numerical = 4,
    /// The caller passed a NULL pointer, a non-UTF-8 string, or an
    /// out-of-range dimension.
    InvalidArgument = 5,
    /// An internal panic was caught at the boundary; the handle should be
    /// considered poisoned and freed.
    Panic = 6,
}

/// Opaque handle to a loaded recognizer: model weights, architecture
/// configuration, and label vocabulary.
pub struct WxctModel {
    model: Model,
    store: ParamStore,
    config: ModelConfig,
    label_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    // Interior NUL bytes would truncate the C string; replace them.
    let clean: Vec<u8> = msg.bytes().map(|b| if b == 0 { b' ' } else { b }).collect();
    let c = CString::new(clean).expect("NUL bytes were just stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = c);
}

fn clear_last_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

fn status_of(err: &WxError) -> WxctStatus {
    match err.exit_code() {
        2 => WxctStatus::Config,
        3 => WxctStatus::Data,
        4 => WxctStatus::Numerical,
        _ => WxctStatus::Error,
    }
}

/// Runs `f`, converting any panic into `WxctStatus::Panic` instead of
/// unwinding into foreign stack frames.
fn guarded(f: impl FnOnce() -> WxctStatus) -> WxctStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_last_error("internal panic caught at the C boundary");
            WxctStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be non-NULL and point to a NUL-terminated string.
unsafe fn cstr_to_path(ptr: *const c_char) -> Result<PathBuf, WxctStatus> {
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_last_error("path is not valid UTF-8");
            Err(WxctStatus::InvalidArgument)
        }
    }
}

fn load_handle(path: &Path) -> wxct::Result<WxctModel> {
    let loaded = load_model(path)?;
    let label_names = loaded
        .vocab
        .names()
        .iter()
        .map(|n| {
            CString::new(n.as_str())
                .map_err(|_| WxError::Data(format!("label name {n:?} contains a NUL byte")))
        })
        .collect::<wxct::Result<Vec<_>>>()?;
    Ok(WxctModel {
        model: loaded.model,
        store: loaded.store,
        config: loaded.config,
        label_names,
    })
}

/// Resizes to the model's input resolution and runs one deterministic
/// forward pass with every label masked (pure inference).
fn predict_plane(handle: &mut WxctModel, img: &ImagePlane) -> wxct::Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let plane = prepare_sample(img, handle.config.backbone.input_size, SampleMode::Eval, &mut rng)?;
    let images = image_to_chw(&plane).insert_axis(Axis(0));
    let states = vec![LabelStateVector::all_masked(vec![false; handle.model.n_labels()])];
    let probs = handle.model.predict_probs(&mut handle.store, &images, &states)?;
    Ok(probs.row(0).to_vec())
}

/// Writes prediction output and maps errors to a status, shared by both
/// predict entry points.
fn finish_predict(
    handle: &mut WxctModel,
    img: &ImagePlane,
    probabilities: *mut c_double,
) -> WxctStatus {
    match predict_plane(handle, img) {
        Ok(row) => {
            // Safety: the caller guarantees `probabilities` holds at least
            // `label_count` doubles (checked non-NULL by the entry point).
            unsafe { std::ptr::copy_nonoverlapping(row.as_ptr(), probabilities, row.len()) };
            WxctStatus::Ok
        }
        Err(e) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
    }
}

/// Returns the library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn wxct_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Returns the message recorded by the most recent failing call on this
/// thread, or an empty string if none failed yet.
///
/// The pointer stays valid until the next failing call on the same thread;
/// do not free it.
#[no_mangle]
pub extern "C" fn wxct_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a model checkpoint from `path` and stores the new handle in
/// `out`.
///
/// On failure `*out` is untouched and the status describes the problem:
/// `WXCT_STATUS_DATA` for unreadable files, `WXCT_STATUS_CONFIG` for
/// checkpoints whose metadata does not describe a loadable model.
///
/// # Safety
/// `path` must be NULL or a NUL-terminated UTF-8 string; `out` must be NULL
/// or point to writable storage for one pointer. (NULL for either is
/// reported as `WXCT_STATUS_INVALID_ARGUMENT` rather than dereferenced.)
#[no_mangle]
pub unsafe extern "C" fn wxct_model_load(
    path: *const c_char,
    out: *mut *mut WxctModel,
) -> WxctStatus {
    guarded(|| {
        clear_last_error();
        if path.is_null() || out.is_null() {
            set_last_error("wxct_model_load: path and out must be non-NULL");
            return WxctStatus::InvalidArgument;
        }
        let path = match cstr_to_path(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match load_handle(&path) {
            Ok(handle) => {
                *out = Box::into_raw(Box::new(handle));
                WxctStatus::Ok
            }
            Err(e) => {
                set_last_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Releases a handle created by [`wxct_model_load`]. Passing NULL is a
/// no-op.
///
/// # Safety
/// `model` must be NULL or a pointer previously returned through
/// `wxct_model_load` that has not yet been freed.
#[no_mangle]
pub unsafe extern "C" fn wxct_model_free(model: *mut WxctModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Returns the number of labels the model predicts, or 0 when `model` is
/// NULL.
///
/// # Safety
/// `model` must be NULL or a live handle from [`wxct_model_load`].
#[no_mangle]
pub unsafe extern "C" fn wxct_model_label_count(model: *const WxctModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (&*model).label_names.len()
}

/// Returns the square input resolution (pixels per side) the model resizes
/// images to, or 0 when `model` is NULL.
///
/// # Safety
/// `model` must be NULL or a live handle from [`wxct_model_load`].
#[no_mangle]
pub unsafe extern "C" fn wxct_model_input_size(model: *const WxctModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (&*model).config.backbone.input_size
}

/// Returns the name of label `index` as a NUL-terminated string borrowed
/// from the handle, or NULL when `model` is NULL or `index` is out of
/// range. The pointer stays valid until the handle is freed.
///
/// # Safety
/// `model` must be NULL or a live handle from [`wxct_model_load`].
#[no_mangle]
pub unsafe extern "C" fn wxct_model_label_name(
    model: *const WxctModel,
    index: size_t,
) -> *const c_char {
    if model.is_null() {
        return std::ptr::null();
    }
    match (&*model).label_names.get(index) {
        Some(name) => name.as_ptr(),
        None => std::ptr::null(),
    }
}

/// Runs inference on an interleaved 8-bit RGB image (row-major, 3 bytes per
/// pixel) and writes one probability in `[0, 1]` per label.
///
/// The image may be any size; it is resized to the model's input
/// resolution. The call is deterministic: the same pixels produce the same
/// probabilities.
///
/// # Safety
/// `model` must be a live handle from [`wxct_model_load`]. `pixels` must
/// point to `width * height * 3` readable bytes and `probabilities` to
/// [`wxct_model_label_count`] writable doubles. NULL pointers are reported
/// as `WXCT_STATUS_INVALID_ARGUMENT`; buffer lengths cannot be checked and
/// must be guaranteed by the caller.
#[no_mangle]
pub unsafe extern "C" fn wxct_predict_rgb8(
    model: *mut WxctModel,
    pixels: *const u8,
    width: size_t,
    height: size_t,
    probabilities: *mut c_double,
) -> WxctStatus {
    guarded(|| {
        clear_last_error();
        if model.is_null() || pixels.is_null() || probabilities.is_null() {
            set_last_error("wxct_predict_rgb8: model, pixels, and probabilities must be non-NULL");
            return WxctStatus::InvalidArgument;
        }
        if width == 0 || height == 0 || width > u32::MAX as usize || height > u32::MAX as usize {
            set_last_error(&format!("wxct_predict_rgb8: bad image dimensions {width}x{height}"));
            return WxctStatus::InvalidArgument;
        }
        let data = std::slice::from_raw_parts(pixels, width * height * 3);
        let img = match ImagePlane::from_rgb8(width as u32, height as u32, data) {
            Ok(img) => img,
            Err(e) => {
                set_last_error(&e.to_string());
                return status_of(&e);
            }
        };
        finish_predict(&mut *model, &img, probabilities)
    })
}

/// Runs inference on a PNG file and writes one probability in `[0, 1]` per
/// label. Equivalent to decoding the file and calling
/// [`wxct_predict_rgb8`].
///
/// # Safety
/// `model` must be a live handle from [`wxct_model_load`]. `path` must be
/// NULL or a NUL-terminated UTF-8 string; `probabilities` must point to
/// [`wxct_model_label_count`] writable doubles.
#[no_mangle]
pub unsafe extern "C" fn wxct_predict_png(
    model: *mut WxctModel,
    path: *const c_char,
    probabilities: *mut c_double,
) -> WxctStatus {
    guarded(|| {
        clear_last_error();
        if model.is_null() || path.is_null() || probabilities.is_null() {
            set_last_error("wxct_predict_png: model, path, and probabilities must be non-NULL");
            return WxctStatus::InvalidArgument;
        }
        let path = match cstr_to_path(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        let img = match ImagePlane::load_png(&path) {
            Ok(img) => img,
            Err(e) => {
                set_last_error(&e.to_string());
                return status_of(&e);
            }
        };
        finish_predict(&mut *model, &img, probabilities)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use serde_json::json;
    use wxct::backbone::{BackboneConfig, BlockKind};
    use wxct::encoder::EncoderConfig;
    use wxct::labels::LabelVocabulary;
    use wxct::model::save_model;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                kind: BlockKind::Basic,
                base_width: 4,
                blocks: vec![1],
                input_size: 16,
                bn_momentum: 0.1,
            },
            encoder: EncoderConfig {
                d_model: 8,
                heads: 2,
                layers: 1,
                ffn_width: 8,
                ffn_dropout: 0.0,
            },
            classifier_dropout: 0.0,
            freeze_backbone: false,
        }
    }

    /// Builds a fresh tiny model, saves it, and returns the checkpoint path.
    fn write_checkpoint(dir: &Path) -> PathBuf {
        let config = tiny_config();
        let vocab = LabelVocabulary::new(vec!["stripes".into(), "glow".into()]).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        Model::new(config.clone(), vocab.len(), &mut store, &mut rng).unwrap();
        let path = dir.join("model.ckpt");
        save_model(&path, &store, &config, &vocab, json!({}), &[]).unwrap();
        path
    }

    fn c_path(path: &Path) -> CString {
        CString::new(path.to_str().unwrap()).unwrap()
    }

    unsafe fn load(path: &Path) -> *mut WxctModel {
        let mut handle: *mut WxctModel = std::ptr::null_mut();
        let status = wxct_model_load(c_path(path).as_ptr(), &mut handle);
        assert_eq!(status, WxctStatus::Ok, "load failed: {}", last_error());
        assert!(!handle.is_null());
        handle
    }

    fn last_error() -> String {
        unsafe {
            CStr::from_ptr(wxct_last_error_message())
                .to_string_lossy()
                .into_owned()
        }
    }

    fn checker_pixels(side: usize) -> Vec<u8> {
        let mut data = vec![0u8; side * side * 3];
        for y in 0..side {
            for x in 0..side {
                let v = if (y / 4 + x / 4) % 2 == 0 { 220 } else { 35 };
                let at = (y * side + x) * 3;
                data[at] = v;
                data[at + 1] = v / 2;
                data[at + 2] = 255 - v;
            }
        }
        data
    }

    #[test]
    fn load_query_predict_and_free() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = write_checkpoint(tmp.path());
        unsafe {
            let handle = load(&ckpt);
            assert_eq!(wxct_model_label_count(handle), 2);
            assert_eq!(wxct_model_input_size(handle), 16);
            let name = wxct_model_label_name(handle, 0);
            assert_eq!(CStr::from_ptr(name).to_str().unwrap(), "stripes");
            let name = wxct_model_label_name(handle, 1);
            assert_eq!(CStr::from_ptr(name).to_str().unwrap(), "glow");
            assert!(wxct_model_label_name(handle, 2).is_null());

            let pixels = checker_pixels(20);
            let mut probs = [-1.0f64; 2];
            let status = wxct_predict_rgb8(handle, pixels.as_ptr(), 20, 20, probs.as_mut_ptr());
            assert_eq!(status, WxctStatus::Ok, "{}", last_error());
            for p in probs {
                assert!(p > 0.0 && p < 1.0, "probability out of range: {p}");
            }

            // Same pixels, same probabilities: inference is deterministic.
            let mut again = [0.0f64; 2];
            let status = wxct_predict_rgb8(handle, pixels.as_ptr(), 20, 20, again.as_mut_ptr());
            assert_eq!(status, WxctStatus::Ok);
            assert_eq!(probs, again);

            wxct_model_free(handle);
        }
    }

    #[test]
    fn png_and_raw_buffer_agree() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = write_checkpoint(tmp.path());
        let side = 16;
        let pixels = checker_pixels(side);
        let plane = ImagePlane::from_rgb8(side as u32, side as u32, &pixels).unwrap();
        let png = tmp.path().join("frame.png");
        plane.save_png(&png).unwrap();
        unsafe {
            let handle = load(&ckpt);
            let mut from_raw = [0.0f64; 2];
            let status =
                wxct_predict_rgb8(handle, pixels.as_ptr(), side, side, from_raw.as_mut_ptr());
            assert_eq!(status, WxctStatus::Ok, "{}", last_error());
            let mut from_png = [0.0f64; 2];
            let status = wxct_predict_png(handle, c_path(&png).as_ptr(), from_png.as_mut_ptr());
            assert_eq!(status, WxctStatus::Ok, "{}", last_error());
            assert_eq!(from_raw, from_png);
            wxct_model_free(handle);
        }
    }

    #[test]
    fn missing_checkpoint_reports_data_error() {
        unsafe {
            let mut handle: *mut WxctModel = std::ptr::null_mut();
            let path = CString::new("/nonexistent/model.ckpt").unwrap();
            let status = wxct_model_load(path.as_ptr(), &mut handle);
            assert_eq!(status, WxctStatus::Data);
            assert!(handle.is_null(), "out must be untouched on failure");
            assert!(last_error().contains("/nonexistent/model.ckpt"));
        }
    }

    #[test]
    fn null_arguments_are_rejected_not_dereferenced() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = write_checkpoint(tmp.path());
        unsafe {
            let status = wxct_model_load(std::ptr::null(), std::ptr::null_mut());
            assert_eq!(status, WxctStatus::InvalidArgument);
            assert!(!last_error().is_empty());

            let handle = load(&ckpt);
            let mut probs = [0.0f64; 2];
            let status = wxct_predict_rgb8(handle, std::ptr::null(), 4, 4, probs.as_mut_ptr());
            assert_eq!(status, WxctStatus::InvalidArgument);
            let pixels = checker_pixels(4);
            let status = wxct_predict_rgb8(handle, pixels.as_ptr(), 0, 4, probs.as_mut_ptr());
            assert_eq!(status, WxctStatus::InvalidArgument);
            let status = wxct_predict_png(handle, std::ptr::null(), probs.as_mut_ptr());
            assert_eq!(status, WxctStatus::InvalidArgument);
            wxct_model_free(handle);

            // NULL handles are tolerated by the query and free functions.
            assert_eq!(wxct_model_label_count(std::ptr::null()), 0);
            assert_eq!(wxct_model_input_size(std::ptr::null()), 0);
            assert!(wxct_model_label_name(std::ptr::null(), 0).is_null());
            wxct_model_free(std::ptr::null_mut());
        }
    }

    #[test]
    fn invalid_utf8_path_is_invalid_argument() {
        unsafe {
            let mut handle: *mut WxctModel = std::ptr::null_mut();
            let bogus = CString::new(vec![0xffu8, 0xfe]).unwrap();
            let status = wxct_model_load(bogus.as_ptr(), &mut handle);
            assert_eq!(status, WxctStatus::InvalidArgument);
            assert!(last_error().contains("UTF-8"));
        }
    }

    #[test]
    fn version_and_error_message_are_always_readable() {
        unsafe {
            let version = CStr::from_ptr(wxct_version()).to_str().unwrap();
            assert_eq!(version, env!("CARGO_PKG_VERSION"));
            // Before any failure on this thread the message is empty.
            let _ = CStr::from_ptr(wxct_last_error_message());
        }
    }

    #[test]
    fn probabilities_match_the_rust_api() {
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = write_checkpoint(tmp.path());
        let side = 16usize;
        let pixels = checker_pixels(side);

        // Reference: drive the core crate directly.
        let img = ImagePlane::from_rgb8(side as u32, side as u32, &pixels).unwrap();
        let loaded = load_model(&ckpt).unwrap();
        let mut store = loaded.store;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plane = prepare_sample(&img, 16, SampleMode::Eval, &mut rng).unwrap();
        let images = image_to_chw(&plane).insert_axis(Axis(0));
        let states = vec![LabelStateVector::all_masked(vec![false; 2])];
        let expected = loaded.model.predict_probs(&mut store, &images, &states).unwrap();

        unsafe {
            let handle = load(&ckpt);
            let mut probs = [0.0f64; 2];
            let status = wxct_predict_rgb8(handle, pixels.as_ptr(), side, side, probs.as_mut_ptr());
            assert_eq!(status, WxctStatus::Ok, "{}", last_error());
            assert_eq!(probs[0], expected[[0, 0]]);
            assert_eq!(probs[1], expected[[0, 1]]);
            wxct_model_free(handle);
        }
    }

    #[test]
    fn grayscale_plane_roundtrip_through_raw_buffer() {
        // An ImagePlane built from arbitrary f64 pixels quantizes to the
        // 8-bit grid on save; feeding the same bytes through the C entry
        // point must agree with the PNG path byte for byte.
        let tmp = tempfile::tempdir().unwrap();
        let ckpt = write_checkpoint(tmp.path());
        let plane = ImagePlane::new(
            Array3::from_shape_fn((16, 16, 3), |(y, x, c)| ((y * 16 + x + c * 7) % 256) as f64),
            255.0,
        )
        .unwrap();
        let png = tmp.path().join("gradient.png");
        plane.save_png(&png).unwrap();
        let raw: Vec<u8> = plane.pixels().iter().map(|&v| v as u8).collect();
        unsafe {
            let handle = load(&ckpt);
            let mut from_png = [0.0f64; 2];
            let mut from_raw = [0.0f64; 2];
            assert_eq!(
                wxct_predict_png(handle, c_path(&png).as_ptr(), from_png.as_mut_ptr()),
                WxctStatus::Ok
            );
            assert_eq!(
                wxct_predict_rgb8(handle, raw.as_ptr(), 16, 16, from_raw.as_mut_ptr()),
                WxctStatus::Ok
            );
            assert_eq!(from_png, from_raw);
            wxct_model_free(handle);
        }
    }
}
