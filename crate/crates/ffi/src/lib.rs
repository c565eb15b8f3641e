//! C interface: checkpoint loading, forward passes, post-processing and
//! metrics. Every entry point returns a [`StaleStatus`]; the message of the
//! most recent failure on the calling thread is available through
//! [`stale_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use stale_lab::eval::{average_precision, tiou, GtSegment, ScoredSegment};
use stale_lab::inference::{detect, soft_nms, Detection, InferenceConfig, NmsMode};
use stale_lab::model::{ModelOutput, Stale};
use stale_lab::tensor::Tensor;
use stale_lab::trainer::load_checkpoint;
use stale_lab::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StaleStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numerical = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A scored segment in normalized time.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaleDetection {
    pub start: f64,
    pub end: f64,
    pub class_index: u32,
    pub confidence: f64,
    pub source_snippet: u32,
}

/// Opaque handle to a loaded model.
pub struct StaleModel {
    model: Stale<f64>,
    t_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: StaleStatus, msg: impl Into<String>) -> StaleStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
    status
}

fn from_error(e: Error) -> StaleStatus {
    let status = match &e {
        Error::Io { .. } => StaleStatus::Io,
        Error::Json { .. } | Error::Format(_) | Error::ConfigHashMismatch { .. } => StaleStatus::Format,
        Error::Numerical(_) => StaleStatus::Numerical,
        _ => StaleStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> StaleStatus) -> StaleStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(StaleStatus::Panic, "internal panic"),
    }
}

unsafe fn input<'a, T>(p: *const T, n: usize) -> Option<&'a [T]> {
    if n == 0 {
        Some(&[])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts(p, n))
    }
}

unsafe fn output<'a, T>(p: *mut T, n: usize) -> Option<&'a mut [T]> {
    if n == 0 {
        Some(&mut [])
    } else if p.is_null() {
        None
    } else {
        Some(slice::from_raw_parts_mut(p, n))
    }
}

fn to_c(d: &Detection) -> StaleDetection {
    StaleDetection {
        start: d.start,
        end: d.end,
        class_index: d.class_index as u32,
        confidence: d.confidence,
        source_snippet: d.source_snippet as u32,
    }
}

fn from_c(d: &StaleDetection) -> Detection {
    Detection {
        start: d.start,
        end: d.end,
        class_index: d.class_index as usize,
        confidence: d.confidence,
        source_snippet: d.source_snippet as usize,
    }
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn stale_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Temporal IoU of `[a_start, a_end]` and `[b_start, b_end]`.
#[no_mangle]
pub extern "C" fn stale_tiou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> f64 {
    tiou((a_start, a_end), (b_start, b_end))
}

/// Classwise gaussian SoftNMS. Writes at most `capacity` detections to `out`
/// and their count to `out_len`.
///
/// # Safety
/// `dets` must hold `n` elements and `out` `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn stale_soft_nms(
    dets: *const StaleDetection,
    n: usize,
    sigma: f64,
    score_floor: f64,
    max_detections: usize,
    out: *mut StaleDetection,
    capacity: usize,
    out_len: *mut usize,
) -> StaleStatus {
    guard(|| {
        let (Some(dets), Some(out)) = (input(dets, n), output(out, capacity)) else {
            return fail(StaleStatus::NullPointer, "null detection buffer");
        };
        if out_len.is_null() {
            return fail(StaleStatus::NullPointer, "null out_len");
        }
        if !(sigma > 0.0) {
            return fail(StaleStatus::InvalidArgument, format!("sigma {sigma} must be positive"));
        }
        let input: Vec<Detection> = dets.iter().map(from_c).collect();
        let kept = soft_nms(&input, NmsMode::Gaussian { sigma }, score_floor, max_detections);
        *out_len = kept.len();
        if kept.len() > capacity {
            return fail(
                StaleStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", kept.len()),
            );
        }
        out.iter_mut().zip(&kept).for_each(|(o, d)| *o = to_c(d));
        StaleStatus::Ok
    })
}

/// Interpolated average precision of one class. Detections and ground truths
/// are parallel arrays; `*_video` values identify the video of each segment.
///
/// # Safety
/// Each detection array must hold `n_dets` elements and each ground-truth
/// array `n_gts`.
#[no_mangle]
pub unsafe extern "C" fn stale_average_precision(
    det_video: *const u32,
    det_start: *const f64,
    det_end: *const f64,
    det_score: *const f64,
    n_dets: usize,
    gt_video: *const u32,
    gt_start: *const f64,
    gt_end: *const f64,
    n_gts: usize,
    tau: f64,
    out_ap: *mut f64,
) -> StaleStatus {
    guard(|| {
        let dets = (
            input(det_video, n_dets),
            input(det_start, n_dets),
            input(det_end, n_dets),
            input(det_score, n_dets),
        );
        let gts = (input(gt_video, n_gts), input(gt_start, n_gts), input(gt_end, n_gts));
        let ((Some(dv), Some(ds), Some(de), Some(sc)), (Some(gv), Some(gs), Some(ge))) = (dets, gts) else {
            return fail(StaleStatus::NullPointer, "null segment array");
        };
        if out_ap.is_null() {
            return fail(StaleStatus::NullPointer, "null out_ap");
        }
        let d: Vec<ScoredSegment> = (0..n_dets)
            .map(|i| ScoredSegment {
                video: dv[i].to_string(),
                start: ds[i],
                end: de[i],
                score: sc[i],
            })
            .collect();
        let g: Vec<GtSegment> = (0..n_gts)
            .map(|i| GtSegment {
                video: gv[i].to_string(),
                start: gs[i],
                end: ge[i],
            })
            .collect();
        *out_ap = average_precision(&d, &g, tau);
        StaleStatus::Ok
    })
}

/// Loads a checkpoint manifest written by the training command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn stale_model_load(path: *const c_char, out: *mut *mut StaleModel) -> StaleStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(StaleStatus::NullPointer, "null path or handle pointer");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return fail(StaleStatus::InvalidArgument, "path is not UTF-8");
        };
        match load_checkpoint::<f64>(Path::new(path)) {
            Ok(ckpt) => {
                let handle = StaleModel {
                    t_len: ckpt.manifest.config.t_len,
                    model: ckpt.model,
                };
                *out = Box::into_raw(Box::new(handle));
                StaleStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Releases a handle from [`stale_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from [`stale_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn stale_model_free(model: *mut StaleModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature rows, token width and snippet count expected by the model.
///
/// # Safety
/// `model` must be a live handle; outputs may be null.
#[no_mangle]
pub unsafe extern "C" fn stale_model_dims(
    model: *const StaleModel,
    input_dim: *mut usize,
    token_dim: *mut usize,
    t_len: *mut usize,
) -> StaleStatus {
    let Some(m) = model.as_ref() else {
        return fail(StaleStatus::NullPointer, "null model");
    };
    for (p, v) in [
        (input_dim, m.model.dims.input_dim),
        (token_dim, m.model.dims.token_dim),
        (t_len, m.t_len),
    ] {
        if !p.is_null() {
            *p = v;
        }
    }
    StaleStatus::Ok
}

unsafe fn run_forward(
    model: *const StaleModel,
    features: *const f64,
    t: usize,
    tokens: *const f64,
    k: usize,
) -> Result<ModelOutput, StaleStatus> {
    let m = model
        .as_ref()
        .ok_or_else(|| fail(StaleStatus::NullPointer, "null model"))?;
    let (c_in, c_tok) = (m.model.dims.input_dim, m.model.dims.token_dim);
    if t == 0 || k == 0 {
        return Err(fail(
            StaleStatus::InvalidArgument,
            "snippet and class counts must be positive",
        ));
    }
    let e = input(features, c_in * t).ok_or_else(|| fail(StaleStatus::NullPointer, "null features"))?;
    let tok = input(tokens, k * c_tok).ok_or_else(|| fail(StaleStatus::NullPointer, "null tokens"))?;
    let e = Tensor::from_vec(c_in, t, e.to_vec());
    let tok = Tensor::from_vec(k, c_tok, tok.to_vec());
    m.model.forward(&e, &tok).map_err(from_error)
}

/// Forward pass on `features` (`input_dim x t`, row-major) against class
/// tokens (`k x token_dim`). Writes `P` (`(k+1) x t`) and `M` (`t x t`).
///
/// # Safety
/// Buffers must match the sizes above.
#[no_mangle]
pub unsafe extern "C" fn stale_model_forward(
    model: *const StaleModel,
    features: *const f64,
    t: usize,
    tokens: *const f64,
    k: usize,
    out_p: *mut f64,
    out_m: *mut f64,
) -> StaleStatus {
    guard(|| {
        let out = match run_forward(model, features, t, tokens, k) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let (Some(p), Some(m)) = (output(out_p, (k + 1) * t), output(out_m, t * t)) else {
            return fail(StaleStatus::NullPointer, "null output buffer");
        };
        p.copy_from_slice(out.p.data());
        m.copy_from_slice(out.m.data());
        StaleStatus::Ok
    })
}

/// Forward pass plus default post-processing with class threshold `theta_c`.
///
/// # Safety
/// As for [`stale_model_forward`]; `out` must hold `capacity` detections.
#[no_mangle]
pub unsafe extern "C" fn stale_model_detect(
    model: *const StaleModel,
    features: *const f64,
    t: usize,
    tokens: *const f64,
    k: usize,
    theta_c: f64,
    out: *mut StaleDetection,
    capacity: usize,
    out_len: *mut usize,
) -> StaleStatus {
    guard(|| {
        let cfg = InferenceConfig {
            theta_c,
            ..InferenceConfig::default()
        };
        if let Err(e) = cfg.validate() {
            return from_error(e);
        }
        let result = match run_forward(model, features, t, tokens, k) {
            Ok(o) => o,
            Err(s) => return s,
        };
        let (Some(buf), false) = (output(out, capacity), out_len.is_null()) else {
            return fail(StaleStatus::NullPointer, "null detection buffer");
        };
        let dets = detect(&result, &cfg);
        *out_len = dets.len();
        if dets.len() > capacity {
            return fail(
                StaleStatus::BufferTooSmall,
                format!("{} detections, capacity {capacity}", dets.len()),
            );
        }
        buf.iter_mut().zip(&dets).for_each(|(o, d)| *o = to_c(d));
        StaleStatus::Ok
    })
}
