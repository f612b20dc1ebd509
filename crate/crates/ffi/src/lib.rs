//! C ABI over the plaindet detector and its box utilities.
//!
//! Every function returns a [`PdStatus`]; on failure a message is available
//! from [`pd_last_error_message`] on the same thread. Handles are opaque and
//! released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use plaindet::backbone::{propagation_indices, Placement};
use plaindet::checkpoint::load_checkpoint;
use plaindet::detect::{iou, soft_nms_indices, BBox, Detection, Detector, SoftNms, SoftNmsMethod};
use plaindet::nn::ParamStore;
use plaindet::train::build_detector;
use plaindet::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Config = 5,
    Dimension = 6,
    Internal = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PdBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PdDetection {
    pub bbox: PdBox,
    /// Zero-based foreground class.
    pub class_id: u32,
    pub score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdSoftNmsMethod {
    Linear = 0,
    Gaussian = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdPlacement {
    Evenly = 0,
    FirstK = 1,
    LastK = 2,
}

/// A loaded detector.
pub struct PdDetector {
    detector: Detector,
    params: ParamStore,
}

/// Detections for one image.
pub struct PdDetections {
    items: Vec<Detection>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> PdStatus {
    match e {
        Error::Io { .. } => PdStatus::Io,
        Error::Checkpoint { .. } => PdStatus::Checkpoint,
        Error::Config(_) | Error::Schema(_) | Error::Json { .. } => PdStatus::Config,
        Error::Dim { .. } => PdStatus::Dimension,
        _ => PdStatus::Internal,
    }
}

/// Run `f`, recording its error message and mapping panics to `Internal`.
fn guard(f: impl FnOnce() -> Result<(), (PdStatus, String)>) -> PdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PdStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (PdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (PdStatus, String) {
    (PdStatus::NullPointer, format!("{what} is null"))
}

impl From<PdBox> for BBox {
    fn from(b: PdBox) -> Self {
        BBox::new(b.x1, b.y1, b.x2, b.y2)
    }
}

impl From<BBox> for PdBox {
    fn from(b: BBox) -> Self {
        PdBox { x1: b.x1, y1: b.y1, x2: b.x2, y2: b.y2 }
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint (with its embedded config) into a new detector.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pd_detector_load(path: *const c_char, out: *mut *mut PdDetector) -> PdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| (PdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = load_checkpoint(Path::new(path)).map_err(lib_err)?;
        let cfg = ck.config().map_err(lib_err)?;
        let (detector, mut params) = build_detector(&cfg, 0).map_err(lib_err)?;
        ck.apply(&mut params).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PdDetector { detector, params }));
        Ok(())
    })
}

/// # Safety
/// `det` must come from [`pd_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_detector_free(det: *mut PdDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Detect objects in one `[3, height, width]` image of `f64` values in [0, 1].
///
/// # Safety
/// `pixels` must point at `3 * height * width` values; `det` and `out` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_detector_detect(
    det: *const PdDetector,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut *mut PdDetections,
) -> PdStatus {
    guard(|| {
        let det = det.as_ref().ok_or_else(|| null("det"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if height == 0 || width == 0 {
            return Err((PdStatus::InvalidArgument, "image must be non-empty".into()));
        }
        let data = std::slice::from_raw_parts(pixels, 3 * height * width).to_vec();
        let image = Tensor::new(data, &[1, 3, height, width]).map_err(lib_err)?;
        let mut dets = det.detector.detect(&det.params, &image).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(PdDetections { items: dets.remove(0) }));
        Ok(())
    })
}

/// # Safety
/// `dets` must be null or a live handle from [`pd_detector_detect`].
#[no_mangle]
pub unsafe extern "C" fn pd_detections_len(dets: *const PdDetections) -> usize {
    dets.as_ref().map_or(0, |d| d.items.len())
}

/// # Safety
/// `dets` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pd_detections_get(dets: *const PdDetections, index: usize, out: *mut PdDetection) -> PdStatus {
    guard(|| {
        let d = dets.as_ref().ok_or_else(|| null("dets"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let item = d
            .items
            .get(index)
            .ok_or_else(|| (PdStatus::InvalidArgument, format!("index {index} out of range for {} detections", d.items.len())))?;
        *out = PdDetection { bbox: item.bbox.into(), class_id: item.class_id as u32, score: item.score };
        Ok(())
    })
}

/// # Safety
/// `dets` must come from [`pd_detector_detect`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pd_detections_free(dets: *mut PdDetections) {
    if !dets.is_null() {
        drop(Box::from_raw(dets));
    }
}

/// Intersection over union of two boxes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_iou(a: *const PdBox, b: *const PdBox, out: *mut f64) -> PdStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = iou(&(*a).into(), &(*b).into());
        Ok(())
    })
}

/// Soft-NMS over `n` boxes. Writes the kept indices (selection order) and
/// their decayed scores to arrays of capacity `n`, and the count to `out_len`.
///
/// # Safety
/// `boxes` and `scores` must hold `n` entries; `out_indices` and
/// `out_scores` must have room for `n`.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn pd_soft_nms(
    boxes: *const PdBox,
    scores: *const f64,
    n: usize,
    method: PdSoftNmsMethod,
    nt: f64,
    sigma: f64,
    score_floor: f64,
    out_indices: *mut usize,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> PdStatus {
    guard(|| {
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        if n == 0 {
            *out_len = 0;
            return Ok(());
        }
        if boxes.is_null() || scores.is_null() || out_indices.is_null() || out_scores.is_null() {
            return Err(null("an input or output array"));
        }
        if sigma.is_nan() || sigma <= 0.0 || !(0.0..=1.0).contains(&nt) {
            return Err((PdStatus::InvalidArgument, format!("need sigma > 0 and nt in [0, 1], got sigma {sigma}, nt {nt}")));
        }
        let bx: Vec<BBox> = std::slice::from_raw_parts(boxes, n).iter().map(|&b| b.into()).collect();
        let sc = std::slice::from_raw_parts(scores, n);
        let method = match method {
            PdSoftNmsMethod::Linear => SoftNmsMethod::Linear,
            PdSoftNmsMethod::Gaussian => SoftNmsMethod::Gaussian,
        };
        let kept = soft_nms_indices(&bx, sc, &SoftNms { method, nt, sigma, score_floor });
        let (oi, os) = (std::slice::from_raw_parts_mut(out_indices, n), std::slice::from_raw_parts_mut(out_scores, n));
        for (k, (i, s)) in kept.iter().enumerate() {
            oi[k] = *i;
            os[k] = *s;
        }
        *out_len = kept.len();
        Ok(())
    })
}

/// Indices of the blocks that carry propagation. Writes at most `capacity`
/// entries and the full count to `out_len`.
///
/// # Safety
/// `out` must have room for `capacity` entries; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pd_propagation_indices(
    depth: usize,
    count: usize,
    placement: PdPlacement,
    out: *mut usize,
    capacity: usize,
    out_len: *mut usize,
) -> PdStatus {
    guard(|| {
        if out_len.is_null() || (out.is_null() && capacity > 0) {
            return Err(null("out"));
        }
        let placement = match placement {
            PdPlacement::Evenly => Placement::Evenly,
            PdPlacement::FirstK => Placement::FirstK,
            PdPlacement::LastK => Placement::LastK,
        };
        let idx = propagation_indices(depth, count, placement).map_err(lib_err)?;
        *out_len = idx.len();
        if idx.len() > capacity {
            return Err((PdStatus::InvalidArgument, format!("need capacity {}, have {capacity}", idx.len())));
        }
        let dst = if capacity == 0 { &mut [][..] } else { std::slice::from_raw_parts_mut(out, capacity) };
        dst[..idx.len()].copy_from_slice(&idx);
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}
