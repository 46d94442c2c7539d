//! C ABI over the adkd detector.
//!
//! Handles are opaque heap objects owned by the caller and released with
//! the matching `*_free`. Every fallible call returns an [`AdkdStatus`];
//! on failure the message is available from [`adkd_last_error`] on the
//! same thread until the next failing call. Panics never cross the
//! boundary: they are reported as [`AdkdStatus::Internal`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use adkd::data::{load_image, preprocess, raster_to_tensor, Raster};
use adkd::inference::{Detector, Inference};
use adkd::metrics::auroc;
use adkd::trainer::Checkpoint;
use adkd::{weights, Error};

/// Result code of every fallible call; zero is success.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdkdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Dimension = 5,
    Config = 6,
    Weights = 7,
    Dataset = 8,
    UndefinedMetric = 9,
    Internal = 10,
}

impl From<&Error> for AdkdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => AdkdStatus::Io,
            Error::Parse { .. } => AdkdStatus::Parse,
            Error::Dimension(_) => AdkdStatus::Dimension,
            Error::Config(_) | Error::Resume(_) => AdkdStatus::Config,
            Error::Weights(_) | Error::NamedTensors(_) => AdkdStatus::Weights,
            Error::Dataset(_) | Error::Contract(_) => AdkdStatus::Dataset,
            Error::UndefinedMetric(_) => AdkdStatus::UndefinedMetric,
            Error::Diverged { .. } => AdkdStatus::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(AdkdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn fail(status: AdkdStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdkdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdkdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AdkdStatus::Internal
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| fail(AdkdStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, writable location.
    unsafe { p.as_mut() }.ok_or_else(|| fail(AdkdStatus::NullPointer, format!("{what} is null")))
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(fail(AdkdStatus::NullPointer, "path is null"));
    }
    // SAFETY: non-null and NUL-terminated by contract.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| fail(AdkdStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Teacher and student backbones with the preprocessing of their run.
pub struct AdkdDetector {
    detector: Detector<f32>,
    input_size: (usize, usize),
    mean: [f64; 3],
    std: [f64; 3],
}

/// Anomaly map at the network input resolution plus its image score.
pub struct AdkdMap {
    result: Inference<f32>,
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn adkd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn adkd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a training checkpoint; `*out` receives a new detector.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn adkd_detector_load(path: *const c_char, out: *mut *mut AdkdDetector) -> AdkdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let ckpt = Checkpoint::load(&path_arg(path)?)?;
        let det = AdkdDetector {
            detector: ckpt.detector()?,
            input_size: ckpt.config.input_size(),
            mean: ckpt.config.norm_mean,
            std: ckpt.config.norm_std,
        };
        *out = Box::into_raw(Box::new(det));
        Ok(())
    })
}

/// Releases a detector; null is ignored.
///
/// # Safety
/// `det` must be null or a detector from [`adkd_detector_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adkd_detector_free(det: *mut AdkdDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Network input height and width; maps have this size.
///
/// # Safety
/// `det` must be a live detector; `height` and `width` writable pointers.
#[no_mangle]
pub unsafe extern "C" fn adkd_detector_input_size(
    det: *const AdkdDetector,
    height: *mut u32,
    width: *mut u32,
) -> AdkdStatus {
    guard(|| {
        let d = non_null(det, "detector")?;
        *out_ptr(height, "height")? = d.input_size.0 as u32;
        *out_ptr(width, "width")? = d.input_size.1 as u32;
        Ok(())
    })
}

fn infer(d: &AdkdDetector, image: &adkd::Tensor<f32>) -> Result<*mut AdkdMap, Failure> {
    let x = preprocess(image, d.input_size, d.mean, d.std)?;
    let result = d.detector.infer(&x)?;
    Ok(Box::into_raw(Box::new(AdkdMap { result })))
}

/// Anomaly map of a PPM or PGM file.
///
/// # Safety
/// `det` must be a live detector, `path` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adkd_detector_infer_file(
    det: *const AdkdDetector,
    path: *const c_char,
    out: *mut *mut AdkdMap,
) -> AdkdStatus {
    guard(|| {
        let d = non_null(det, "detector")?;
        let out = out_ptr(out, "out")?;
        *out = infer(d, &load_image(&path_arg(path)?)?)?;
        Ok(())
    })
}

/// Anomaly map of an interleaved 8-bit image with 1 or 3 channels, rows
/// tightly packed.
///
/// # Safety
/// `pixels` must point to `height * width * channels` readable bytes.
#[no_mangle]
pub unsafe extern "C" fn adkd_detector_infer_pixels(
    det: *const AdkdDetector,
    pixels: *const u8,
    height: u32,
    width: u32,
    channels: u32,
    out: *mut *mut AdkdMap,
) -> AdkdStatus {
    guard(|| {
        let d = non_null(det, "detector")?;
        let out = out_ptr(out, "out")?;
        if pixels.is_null() {
            return Err(fail(AdkdStatus::NullPointer, "pixels is null"));
        }
        if !matches!(channels, 1 | 3) || height == 0 || width == 0 {
            return Err(fail(
                AdkdStatus::InvalidArgument,
                format!("unsupported image {height}x{width}x{channels}"),
            ));
        }
        let (h, w, c) = (height as usize, width as usize, channels as usize);
        let raster = Raster {
            width: w,
            height: h,
            channels: c,
            pixels: std::slice::from_raw_parts(pixels, h * w * c).to_vec(),
        };
        *out = infer(d, &raster_to_tensor(&raster))?;
        Ok(())
    })
}

/// Releases a map; null is ignored.
///
/// # Safety
/// `map` must be null or a map from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn adkd_map_free(map: *mut AdkdMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Image-level score (maximum of the map).
///
/// # Safety
/// `map` must be a live map and `score` writable.
#[no_mangle]
pub unsafe extern "C" fn adkd_map_score(map: *const AdkdMap, score: *mut f32) -> AdkdStatus {
    guard(|| {
        *out_ptr(score, "score")? = non_null(map, "map")?.result.score;
        Ok(())
    })
}

/// Seconds spent computing the map.
///
/// # Safety
/// `map` must be a live map and `seconds` writable.
#[no_mangle]
pub unsafe extern "C" fn adkd_map_seconds(map: *const AdkdMap, seconds: *mut f64) -> AdkdStatus {
    guard(|| {
        *out_ptr(seconds, "seconds")? = non_null(map, "map")?.result.elapsed.as_secs_f64();
        Ok(())
    })
}

/// Map height and width.
///
/// # Safety
/// `map` must be a live map; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn adkd_map_size(map: *const AdkdMap, height: *mut u32, width: *mut u32) -> AdkdStatus {
    guard(|| {
        let m = &non_null(map, "map")?.result.map;
        *out_ptr(height, "height")? = m.height() as u32;
        *out_ptr(width, "width")? = m.width() as u32;
        Ok(())
    })
}

/// Copies the row-major map into `buffer`, which holds `len` floats.
///
/// # Safety
/// `buffer` must point to `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn adkd_map_copy(map: *const AdkdMap, buffer: *mut f32, len: usize) -> AdkdStatus {
    guard(|| {
        let data = non_null(map, "map")?.result.map.scores.data();
        if buffer.is_null() {
            return Err(fail(AdkdStatus::NullPointer, "buffer is null"));
        }
        if len < data.len() {
            return Err(fail(
                AdkdStatus::InvalidArgument,
                format!("buffer holds {len} values, map has {}", data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buffer, data.len()).copy_from_slice(data);
        Ok(())
    })
}

/// Writes the map as an `ADAM` grid file.
///
/// # Safety
/// `map` must be a live map and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn adkd_map_save(map: *const AdkdMap, path: *const c_char) -> AdkdStatus {
    guard(|| {
        let bytes = weights::encode_map(&non_null(map, "map")?.result.map.scores)?;
        let path = path_arg(path)?;
        std::fs::write(&path, bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    })
}

/// Rank-based AUROC of `n` scores; `labels[i]` nonzero marks anomalous.
///
/// # Safety
/// `scores` and `labels` must point to `n` readable values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn adkd_auroc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> AdkdStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        if scores.is_null() || labels.is_null() {
            return Err(fail(AdkdStatus::NullPointer, "scores or labels is null"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|&b| b != 0).collect();
        *out = auroc(s, &l)?;
        Ok(())
    })
}
