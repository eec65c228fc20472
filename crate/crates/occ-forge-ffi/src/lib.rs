//! C ABI over the occ-forge pipeline.
//!
//! Conventions: constructors return an owned opaque pointer or null on
//! failure; `ocf_last_error` retrieves the failure message for the calling
//! thread. Every `*_free` accepts null. Strings returned as `char*` are owned
//! by the caller and released with `ocf_string_free`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use libc::{c_char, size_t};

use occ_forge::geometry::project;
use occ_forge::pipeline::{run_fusion_pipeline, run_kl_path, FusionArtifacts, PipelineConfig};
use occ_forge::scene::SceneSpec;

/// Result code of fallible C-ABI calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OcfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    RuntimeError = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let message = message.into();
    let cstring = CString::new(message.replace('\0', " "))
        .unwrap_or_else(|_| CString::new("error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(cstring));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

/// Opaque scene handle.
pub struct OcfScene {
    inner: SceneSpec,
}

/// Opaque pipeline-config handle.
pub struct OcfConfig {
    inner: PipelineConfig,
}

/// Opaque result of a fusion-path run.
pub struct OcfFusionResult {
    inner: FusionArtifacts,
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Option<&'a str> {
    if ptr.is_null() {
        set_error("null string argument");
        return None;
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Some(s),
        Err(_) => {
            set_error("string argument is not valid UTF-8");
            None
        }
    }
}

fn into_string_ptr(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " "))
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn ocf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Returns the calling thread's last error message, or null when none is
/// recorded. The caller owns the string.
#[no_mangle]
pub extern "C" fn ocf_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match slot.borrow().as_ref() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Frees a string returned by this library.
///
/// # Safety
/// `s` must be a pointer previously returned by an occ-forge function that
/// documents caller ownership, and must not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ocf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a scene from JSON; null on failure (see `ocf_last_error`).
///
/// # Safety
/// `json` must be a valid NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_scene_from_json(json: *const c_char) -> *mut OcfScene {
    clear_error();
    let Some(json) = cstr_arg(json) else {
        return ptr::null_mut();
    };
    match serde_json::from_str::<SceneSpec>(json).map_err(|e| e.to_string()).and_then(|scene| {
        scene.validate().map_err(|e| e.to_string())?;
        Ok(scene)
    }) {
        Ok(scene) => Box::into_raw(Box::new(OcfScene { inner: scene })),
        Err(err) => {
            set_error(err);
            ptr::null_mut()
        }
    }
}

/// Builds the built-in desk-scale fixture scene.
#[no_mangle]
pub extern "C" fn ocf_scene_toy_fixture(seed: u64) -> *mut OcfScene {
    clear_error();
    Box::into_raw(Box::new(OcfScene {
        inner: SceneSpec::toy_fixture(seed),
    }))
}

/// Serializes a scene to JSON; caller owns the string.
///
/// # Safety
/// `scene` must be a live pointer from a scene constructor or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_scene_to_json(scene: *const OcfScene) -> *mut c_char {
    clear_error();
    if scene.is_null() {
        set_error("null scene");
        return ptr::null_mut();
    }
    match serde_json::to_string_pretty(&(*scene).inner) {
        Ok(json) => into_string_ptr(json),
        Err(err) => {
            set_error(err.to_string());
            ptr::null_mut()
        }
    }
}

/// Number of cameras in the scene rig.
///
/// # Safety
/// `scene` must be a live pointer from a scene constructor or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_scene_camera_count(scene: *const OcfScene) -> size_t {
    if scene.is_null() {
        return 0;
    }
    (*scene).inner.cameras.len()
}

/// # Safety
/// `scene` must come from a scene constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ocf_scene_free(scene: *mut OcfScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Full-scale default configuration.
#[no_mangle]
pub extern "C" fn ocf_config_default() -> *mut OcfConfig {
    clear_error();
    Box::into_raw(Box::new(OcfConfig {
        inner: PipelineConfig::default(),
    }))
}

/// Desk-scale (20x20x8 grid) configuration.
#[no_mangle]
pub extern "C" fn ocf_config_toy() -> *mut OcfConfig {
    clear_error();
    Box::into_raw(Box::new(OcfConfig {
        inner: PipelineConfig::toy(),
    }))
}

/// Parses a configuration from JSON; null on failure.
///
/// # Safety
/// `json` must be a valid NUL-terminated string or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_config_from_json(json: *const c_char) -> *mut OcfConfig {
    clear_error();
    let Some(json) = cstr_arg(json) else {
        return ptr::null_mut();
    };
    match serde_json::from_str::<PipelineConfig>(json).map_err(|e| e.to_string()).and_then(
        |cfg| {
            cfg.validate().map_err(|e| e.to_string())?;
            Ok(cfg)
        },
    ) {
        Ok(cfg) => Box::into_raw(Box::new(OcfConfig { inner: cfg })),
        Err(err) => {
            set_error(err);
            ptr::null_mut()
        }
    }
}

/// Serializes a configuration to JSON; caller owns the string.
///
/// # Safety
/// `config` must be a live pointer from a config constructor or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_config_to_json(config: *const OcfConfig) -> *mut c_char {
    clear_error();
    if config.is_null() {
        set_error("null config");
        return ptr::null_mut();
    }
    match serde_json::to_string_pretty(&(*config).inner) {
        Ok(json) => into_string_ptr(json),
        Err(err) => {
            set_error(err.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `config` must come from a config constructor and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ocf_config_free(config: *mut OcfConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the fusion pipeline; null on failure.
///
/// # Safety
/// `config` and `scene` must be live pointers from their constructors.
#[no_mangle]
pub unsafe extern "C" fn ocf_run_fusion(
    config: *const OcfConfig,
    scene: *const OcfScene,
) -> *mut OcfFusionResult {
    clear_error();
    if config.is_null() || scene.is_null() {
        set_error("null config or scene");
        return ptr::null_mut();
    }
    let cfg = &(*config).inner;
    let scn = &(*scene).inner;
    let outcome = catch_unwind(AssertUnwindSafe(|| run_fusion_pipeline(cfg, scn)));
    match outcome {
        Ok(Ok(artifacts)) => Box::into_raw(Box::new(OcfFusionResult { inner: artifacts })),
        Ok(Err(err)) => {
            set_error(err.to_string());
            ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic in fusion pipeline");
            ptr::null_mut()
        }
    }
}

/// Voxel grid dimensions (y, x, z) of the predicted occupancy.
///
/// # Safety
/// `result` must be a live pointer from `ocf_run_fusion`; the out pointers
/// must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_fusion_result_dims(
    result: *const OcfFusionResult,
    ny: *mut size_t,
    nx: *mut size_t,
    nz: *mut size_t,
) -> OcfStatus {
    if result.is_null() {
        set_error("null result");
        return OcfStatus::NullArgument;
    }
    let dims = (*result).inner.prediction.dims();
    if !ny.is_null() {
        *ny = dims.0;
    }
    if !nx.is_null() {
        *nx = dims.1;
    }
    if !nz.is_null() {
        *nz = dims.2;
    }
    OcfStatus::Ok
}

/// Copies predicted voxel labels (y-major, z fastest) into `out`.
///
/// # Safety
/// `result` must be a live pointer from `ocf_run_fusion`; `out` must point to
/// at least `len` writable u16 slots.
#[no_mangle]
pub unsafe extern "C" fn ocf_fusion_result_labels(
    result: *const OcfFusionResult,
    out: *mut u16,
    len: size_t,
) -> OcfStatus {
    if result.is_null() || out.is_null() {
        set_error("null result or output buffer");
        return OcfStatus::NullArgument;
    }
    let labels = (*result).inner.prediction.labels().data();
    if len < labels.len() {
        set_error(format!(
            "buffer holds {len} labels, {} required",
            labels.len()
        ));
        return OcfStatus::InvalidArgument;
    }
    ptr::copy_nonoverlapping(labels.as_ptr(), out, labels.len());
    OcfStatus::Ok
}

/// Occupied-vs-empty IoU of the run; NaN when undefined.
///
/// # Safety
/// `result` must be a live pointer from `ocf_run_fusion` or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_fusion_result_binary_iou(result: *const OcfFusionResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    (*result).inner.report.binary_iou.unwrap_or(f64::NAN)
}

/// Mean IoU of the run; NaN when undefined.
///
/// # Safety
/// `result` must be a live pointer from `ocf_run_fusion` or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_fusion_result_miou(result: *const OcfFusionResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    (*result).inner.report.miou.unwrap_or(f64::NAN)
}

/// Full metrics report as JSON; caller owns the string.
///
/// # Safety
/// `result` must be a live pointer from `ocf_run_fusion` or null.
#[no_mangle]
pub unsafe extern "C" fn ocf_fusion_result_report_json(
    result: *const OcfFusionResult,
) -> *mut c_char {
    clear_error();
    if result.is_null() {
        set_error("null result");
        return ptr::null_mut();
    }
    match serde_json::to_string_pretty(&(*result).inner.report) {
        Ok(json) => into_string_ptr(json),
        Err(err) => {
            set_error(err.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// `result` must come from `ocf_run_fusion` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn ocf_fusion_result_free(result: *mut OcfFusionResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Runs the distillation (KL) path and returns its report as JSON; null on
/// failure. Caller owns the string.
///
/// # Safety
/// `config` and `scene` must be live pointers from their constructors.
#[no_mangle]
pub unsafe extern "C" fn ocf_run_kl_report_json(
    config: *const OcfConfig,
    scene: *const OcfScene,
) -> *mut c_char {
    clear_error();
    if config.is_null() || scene.is_null() {
        set_error("null config or scene");
        return ptr::null_mut();
    }
    let cfg = &(*config).inner;
    let scn = &(*scene).inner;
    let outcome = catch_unwind(AssertUnwindSafe(|| run_kl_path(cfg, scn)));
    match outcome {
        Ok(Ok(artifacts)) => match serde_json::to_string_pretty(&artifacts.report) {
            Ok(json) => into_string_ptr(json),
            Err(err) => {
                set_error(err.to_string());
                ptr::null_mut()
            }
        },
        Ok(Err(err)) => {
            set_error(err.to_string());
            ptr::null_mut()
        }
        Err(_) => {
            set_error("internal panic in KL path");
            ptr::null_mut()
        }
    }
}

/// Projects `n` sensor-frame points (x,y,z triples) through camera
/// `cam_index`. Writes (u, v, depth) triples to `out_uvd` and a validity flag
/// per point to `out_valid`; invalid projections leave their triple zeroed.
///
/// # Safety
/// `scene` must be live; `xyz` must hold 3*n readable doubles; `out_uvd` must
/// hold 3*n writable doubles; `out_valid` must hold n writable bytes.
#[no_mangle]
pub unsafe extern "C" fn ocf_project_points(
    scene: *const OcfScene,
    cam_index: size_t,
    xyz: *const f64,
    n: size_t,
    out_uvd: *mut f64,
    out_valid: *mut u8,
) -> OcfStatus {
    clear_error();
    if scene.is_null() || xyz.is_null() || out_uvd.is_null() || out_valid.is_null() {
        set_error("null argument");
        return OcfStatus::NullArgument;
    }
    let scn = &(*scene).inner;
    let Some(cam) = scn.cameras.get(cam_index) else {
        set_error(format!(
            "camera index {cam_index} out of range ({} cameras)",
            scn.cameras.len()
        ));
        return OcfStatus::InvalidArgument;
    };
    let points = std::slice::from_raw_parts(xyz, 3 * n);
    let uvd = std::slice::from_raw_parts_mut(out_uvd, 3 * n);
    let valid = std::slice::from_raw_parts_mut(out_valid, n);
    for i in 0..n {
        let p = nalgebra_point(points[3 * i], points[3 * i + 1], points[3 * i + 2]);
        match project(&p, &cam.extrinsics, &cam.intrinsics) {
            Some(pd) => {
                uvd[3 * i] = pd.u;
                uvd[3 * i + 1] = pd.v;
                uvd[3 * i + 2] = pd.depth;
                valid[i] = 1;
            }
            None => {
                uvd[3 * i] = 0.0;
                uvd[3 * i + 1] = 0.0;
                uvd[3 * i + 2] = 0.0;
                valid[i] = 0;
            }
        }
    }
    OcfStatus::Ok
}

fn nalgebra_point(x: f64, y: f64, z: f64) -> occ_forge::nalgebra::Point3<f64> {
    occ_forge::nalgebra::Point3::new(x, y, z)
}
