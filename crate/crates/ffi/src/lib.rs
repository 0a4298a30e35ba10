//! C ABI over featlift.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a
//! [`FlStatus`]; on failure a message is kept per thread and can be read with
//! [`featlift_last_error`]. Output pointers are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use featlift::extract::{extract_view, ExtractConfig};
use featlift::features::FeatureMap;
use featlift::metrics::hiou;
use featlift::openvocab::{build_class_embeddings, classify_points, EmbeddingMatrix};
use featlift::superpixel::{slic, SlicParams};
use featlift::synthetic::planted_vit;
use featlift::tensorio::{Rgb8Image, Tensor};
use featlift::vit_local::ViTWeights;
use featlift::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlStatus {
    Ok = 0,
    Argument = 1,
    Config = 2,
    Io = 3,
    Format = 4,
    Data = 5,
    Numeric = 6,
    Image = 7,
    NullPointer = 8,
    Panic = 9,
}

impl From<&Error> for FlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Argument(_) => FlStatus::Argument,
            Error::Config(_) => FlStatus::Config,
            Error::Io { .. } => FlStatus::Io,
            Error::Format(_) => FlStatus::Format,
            Error::Data(_) => FlStatus::Data,
            Error::Numeric(_) => FlStatus::Numeric,
            Error::Image { .. } => FlStatus::Image,
        }
    }
}

/// Loaded encoder weights.
pub struct FlWeights(ViTWeights);

/// Dense `height × width × channels` features of one view.
pub struct FlFeatureMap(FeatureMap);

/// Normalized class embeddings.
pub struct FlEmbeddings(EmbeddingMatrix);

/// Extraction settings; see [`featlift_extract_params_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlExtractParams {
    /// Crop scales as fractions of the view; only the first `n_scales` are used.
    pub scales: [f32; 8],
    pub n_scales: usize,
    pub stride_frac: f32,
    pub n_superpixels: usize,
    pub compactness: f32,
    pub slic_iterations: usize,
    pub downscale: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

enum Failure {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FlStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FlStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            FlStatus::from(&e)
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            FlStatus::NullPointer
        }
        Err(_) => {
            set_error("internal panic".into());
            FlStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    // SAFETY: the caller promises `p` is either null or valid for reads.
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and the caller promises `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    // SAFETY: non-null and the caller promises `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    // SAFETY: non-null; the caller promises it is writable.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    // SAFETY: non-null NUL-terminated string per the API contract.
    let s = unsafe { CStr::from_ptr(p) };
    let s = s.to_str().map_err(|_| Error::Argument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

fn free<T>(p: *mut T) {
    if !p.is_null() {
        // SAFETY: `p` came from `Box::into_raw` in this library and is freed once.
        drop(unsafe { Box::from_raw(p) });
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn featlift_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn featlift_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn featlift_extract_params_default() -> FlExtractParams {
    let d = ExtractConfig::default();
    let mut scales = [0.0f32; 8];
    scales[..d.scales.len()].copy_from_slice(&d.scales);
    FlExtractParams {
        scales,
        n_scales: d.scales.len(),
        stride_frac: d.stride_frac,
        n_superpixels: d.n_superpixels,
        compactness: d.compactness,
        slic_iterations: d.slic_iterations,
        downscale: d.downscale,
    }
}

/// Loads a weight bundle folder (`manifest.txt` plus FOT1 tensors).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn featlift_weights_load(dir: *const c_char, out: *mut *mut FlWeights) -> FlStatus {
    guard(|| store(out, FlWeights(ViTWeights::load(path_arg(dir)?)?)))
}

/// The hand-built toy encoder used by the planted scene.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featlift_weights_planted(out: *mut *mut FlWeights) -> FlStatus {
    guard(|| store(out, FlWeights(planted_vit())))
}

/// Output channels of the encoder.
///
/// # Safety
/// `w` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn featlift_weights_channels(w: *const FlWeights) -> usize {
    // SAFETY: forwarded caller contract.
    unsafe { w.as_ref() }.map_or(0, |w| w.0.config.embed_dim)
}

/// # Safety
/// `w` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn featlift_weights_free(w: *mut FlWeights) {
    free(w)
}

fn to_config(p: &FlExtractParams) -> Result<ExtractConfig, Failure> {
    if p.n_scales == 0 || p.n_scales > p.scales.len() {
        return Err(Error::Argument(format!("n_scales must be in [1, {}]", p.scales.len())).into());
    }
    Ok(ExtractConfig {
        scales: p.scales[..p.n_scales].to_vec(),
        stride_frac: p.stride_frac,
        n_superpixels: p.n_superpixels,
        compactness: p.compactness,
        slic_iterations: p.slic_iterations,
        downscale: p.downscale,
    })
}

fn image(rgb: *const u8, width: usize, height: usize) -> Result<Rgb8Image, Failure> {
    let n = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Argument("image size overflows".into()))?;
    Ok(Rgb8Image::new(width, height, slice(rgb, n, "rgb")?.to_vec())?)
}

/// Dense features of one RGB view (`height × width × 3` bytes, row-major).
/// `params` may be null for the defaults.
///
/// # Safety
/// Pointers must be valid for the sizes given; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featlift_extract_view(
    w: *const FlWeights,
    rgb: *const u8,
    width: usize,
    height: usize,
    params: *const FlExtractParams,
    out: *mut *mut FlFeatureMap,
) -> FlStatus {
    guard(|| {
        let w = non_null(w, "weights")?;
        let cfg = match non_null(params, "params") {
            Ok(p) => to_config(p)?,
            Err(_) => ExtractConfig::default(),
        };
        let fm = extract_view(&image(rgb, width, height)?, &w.0, &cfg)?;
        store(out, FlFeatureMap(fm))
    })
}

/// Writes width, height and channels of a feature map; null outputs are skipped.
///
/// # Safety
/// `fm` must be a live handle; outputs must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn featlift_feature_map_dims(
    fm: *const FlFeatureMap,
    width: *mut usize,
    height: *mut usize,
    channels: *mut usize,
) -> FlStatus {
    guard(|| {
        let fm = &non_null(fm, "feature map")?.0;
        for (p, v) in [(width, fm.width), (height, fm.height), (channels, fm.channels)] {
            // SAFETY: caller contract.
            if let Some(r) = unsafe { p.as_mut() } {
                *r = v;
            }
        }
        Ok(())
    })
}

/// Borrowed pointer to the `height × width × channels` values, valid while
/// the handle lives. Null for a null handle.
///
/// # Safety
/// `fm` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn featlift_feature_map_data(fm: *const FlFeatureMap) -> *const f32 {
    // SAFETY: forwarded caller contract.
    unsafe { fm.as_ref() }.map_or(std::ptr::null(), |f| f.0.data.as_ptr())
}

/// # Safety
/// `fm` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn featlift_feature_map_free(fm: *mut FlFeatureMap) {
    free(fm)
}

/// Averages `k × p × c` prompt embeddings into one normalized row per class.
///
/// # Safety
/// `data` must hold `k·p·c` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featlift_embeddings_from_prompts(
    data: *const f32,
    k: usize,
    p: usize,
    c: usize,
    out: *mut *mut FlEmbeddings,
) -> FlStatus {
    guard(|| {
        let n = k.checked_mul(p).and_then(|n| n.checked_mul(c)).ok_or_else(|| Error::Argument("size overflows".into()))?;
        let t = Tensor::from_f32(vec![k, p, c], slice(data, n, "data")?.to_vec())?;
        let names = (0..k).map(|i| format!("class{i}")).collect();
        store(out, FlEmbeddings(build_class_embeddings(&t, names)?))
    })
}

/// # Safety
/// `e` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn featlift_embeddings_free(e: *mut FlEmbeddings) {
    free(e)
}

/// Labels `n` feature rows of `c` values by maximal cosine; rows with zero
/// norm get −1. `scores` may be null.
///
/// # Safety
/// `features` must hold `n·c` floats, `labels` (and `scores` if non-null) `n` slots.
#[no_mangle]
pub unsafe extern "C" fn featlift_classify(
    emb: *const FlEmbeddings,
    features: *const f32,
    n: usize,
    c: usize,
    labels: *mut i32,
    scores: *mut f32,
) -> FlStatus {
    guard(|| {
        let emb = &non_null(emb, "embeddings")?.0;
        let len = n.checked_mul(c).ok_or_else(|| Error::Argument("size overflows".into()))?;
        let seg = classify_points(slice(features, len, "features")?, c, None, emb)?;
        slice_mut(labels, n, "labels")?.copy_from_slice(&seg.labels);
        if !scores.is_null() {
            slice_mut(scores, n, "scores")?.copy_from_slice(&seg.scores);
        }
        Ok(())
    })
}

/// SLIC super-pixels of an RGB image. Writes `width·height` labels and the
/// number of segments.
///
/// # Safety
/// `rgb` must hold `width·height·3` bytes, `labels` `width·height` slots,
/// `n_segments_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn featlift_slic(
    rgb: *const u8,
    width: usize,
    height: usize,
    n_segments: usize,
    compactness: f32,
    labels: *mut i32,
    n_segments_out: *mut usize,
) -> FlStatus {
    guard(|| {
        let img = image(rgb, width, height)?;
        let params = SlicParams { n_segments, compactness, ..SlicParams::new(n_segments) };
        let map = slic(&img, &params)?;
        let count = slice_mut(n_segments_out, 1, "n_segments_out")?;
        slice_mut(labels, width * height, "labels")?.copy_from_slice(&map.labels);
        count[0] = map.n_segments;
        Ok(())
    })
}

/// Harmonic mean of seen and unseen mIoU.
#[no_mangle]
pub extern "C" fn featlift_hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    hiou(miou_seen, miou_unseen)
}
