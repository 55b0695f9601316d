//! C ABI over `mvsc-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_new`,
//! `*_generate`, `*_load` or `*_read` functions and released with the
//! matching `*_free`. Every fallible call returns an [`MvscStatus`]; on
//! failure the message is available from [`mvsc_last_error`] on the same
//! thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use mvsc_core::config::{ModelConfig, SceneConfig, TrainConfig};
use mvsc_core::kernel::{build_lattice, rotate_kernel, RotatedKernel, RotationSpec};
use mvsc_core::metrics::{evaluate, sc_metrics, ssc_metrics};
use mvsc_core::model::Model;
use mvsc_core::scene::{
    generate_scene_with_attempts, load_scene, save_scene, SceneOrigin, SceneParams, SceneSample,
    IGNORE,
};
use mvsc_core::tensor::{read_tensor, write_tensor};
use mvsc_core::train::train;
use mvsc_core::{Error, Tensor};

/// Label value standing for "ignored voxel" in label buffers.
pub const MVSC_IGNORE_LABEL: u32 = u32::MAX;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvscStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument outside the core error kinds (buffer too small, bad UTF-8).
    InvalidArgument = 2,
    Dimension = 3,
    Parameter = 4,
    NonFinite = 5,
    Degenerate = 6,
    Training = 7,
    Generation = 8,
    Config = 9,
    Io = 10,
    Format = 11,
    Determinism = 12,
    Panic = 13,
}

impl From<&Error> for MvscStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Dimension(_) => Self::Dimension,
            Error::Parameter(_) => Self::Parameter,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Determinism(_) => Self::Determinism,
            Error::DegenerateBatch | Error::DegenerateEvaluation => Self::Degenerate,
            Error::Training { .. } => Self::Training,
            Error::Generation { .. } => Self::Generation,
            Error::Config(_) | Error::Json(_) => Self::Config,
            Error::Format { .. } => Self::Format,
            Error::Io { .. } => Self::Io,
        }
    }
}

pub struct MvscTensor {
    inner: Tensor,
}

pub struct MvscKernel {
    inner: RotatedKernel,
}

pub struct MvscScene {
    inner: SceneSample,
}

pub struct MvscModel {
    inner: Model,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MvscScMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Metric summary for a scene. `per_class_iou` buffers passed alongside
/// hold NaN for classes left out of the mean.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MvscMetricSummary {
    pub sc_precision: f64,
    pub sc_recall: f64,
    pub sc_iou: f64,
    pub mean_iou: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(MvscStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(MvscStatus::from(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MvscStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MvscStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvscStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            MvscStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(MvscStatus::NullPointer, format!("{what} is null")))
}

unsafe fn deref_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure(MvscStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(MvscStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(MvscStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn path(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure(MvscStatus::NullPointer, "path is null".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    let slot = deref_mut(out, "output handle")?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn bools(mask: &[u8]) -> Vec<bool> {
    mask.iter().map(|&b| b != 0).collect()
}

fn labels_in(l: &[u32]) -> Vec<usize> {
    l.iter()
        .map(|&v| {
            if v == MVSC_IGNORE_LABEL {
                IGNORE
            } else {
                v as usize
            }
        })
        .collect()
}

fn labels_out(src: &[usize], dst: &mut [u32]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = if s == IGNORE {
            MVSC_IGNORE_LABEL
        } else {
            s as u32
        };
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mvsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failing call on this thread (empty if none).
#[no_mangle]
pub extern "C" fn mvsc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

// ---- tensors ----

/// Copies `data` (row-major, `prod(shape)` values) into a new tensor.
///
/// # Safety
/// `shape` must point to `rank` values and `data` to `prod(shape)` values.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut MvscTensor,
) -> MvscStatus {
    guard(|| {
        let shape = slice(shape, rank, "shape")?.to_vec();
        let len: usize = shape.iter().product();
        let data = slice(data, len, "data")?.to_vec();
        put(
            out,
            MvscTensor {
                inner: Tensor::new(shape, data)?,
            },
        )
    })
}

/// # Safety
/// `t` must be a live tensor handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_rank(t: *const MvscTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.shape().len())
}

/// # Safety
/// `t` must be a live tensor handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_len(t: *const MvscTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.len())
}

/// Writes the shape into `out` (capacity `cap`, at least the rank).
///
/// # Safety
/// `t` must be a live tensor handle; `out` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_shape(
    t: *const MvscTensor,
    out: *mut usize,
    cap: usize,
) -> MvscStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        let shape = t.inner.shape();
        if cap < shape.len() {
            return Err(invalid(format!(
                "shape buffer holds {cap}, rank is {}",
                shape.len()
            )));
        }
        slice_mut(out, shape.len(), "out")?.copy_from_slice(shape);
        Ok(())
    })
}

/// Borrowed pointer to the row-major values; valid until the tensor is freed.
///
/// # Safety
/// `t` must be a live tensor handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_data(t: *const MvscTensor) -> *const f64 {
    t.as_ref()
        .map_or(std::ptr::null(), |t| t.inner.data().as_ptr())
}

/// Reads a CVST file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_read(
    path_: *const c_char,
    out: *mut *mut MvscTensor,
) -> MvscStatus {
    guard(|| {
        let p = path(path_)?;
        put(
            out,
            MvscTensor {
                inner: read_tensor(p)?,
            },
        )
    })
}

/// Writes a CVST file.
///
/// # Safety
/// `t` must be a live tensor handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_write(
    t: *const MvscTensor,
    path_: *const c_char,
) -> MvscStatus {
    guard(|| {
        let t = deref(t, "tensor")?;
        write_tensor(&t.inner, path(path_)?)?;
        Ok(())
    })
}

/// # Safety
/// `t` must be a handle from this library (or null) and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsc_tensor_free(t: *mut MvscTensor) {
    release(t)
}

// ---- kernels ----

/// Rotated copy of the `k×k×k` lattice for angles in degrees.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_kernel_rotate(
    k: usize,
    theta_x: f64,
    theta_y: f64,
    theta_z: f64,
    out: *mut *mut MvscKernel,
) -> MvscStatus {
    guard(|| {
        if ![theta_x, theta_y, theta_z].iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("rotation angles must be finite".into()).into());
        }
        let lattice = build_lattice(k)?;
        let spec = RotationSpec::from_angles([theta_x, theta_y, theta_z]);
        put(
            out,
            MvscKernel {
                inner: rotate_kernel(&lattice, &spec),
            },
        )
    })
}

/// Number of kernel points (`k³`).
///
/// # Safety
/// `kernel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_kernel_len(kernel: *const MvscKernel) -> usize {
    kernel.as_ref().map_or(0, |k| k.inner.len())
}

/// Rotated points as `len × 3` row-major values; `cap` counts doubles.
///
/// # Safety
/// `kernel` must be a live handle; `out` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn mvsc_kernel_points(
    kernel: *const MvscKernel,
    out: *mut f64,
    cap: usize,
) -> MvscStatus {
    guard(|| {
        let k = deref(kernel, "kernel")?;
        let need = 3 * k.inner.len();
        if cap < need {
            return Err(invalid(format!("point buffer holds {cap}, need {need}")));
        }
        let dst = slice_mut(out, need, "out")?;
        for (d, p) in dst.chunks_mut(3).zip(k.inner.points()) {
            d.copy_from_slice(p);
        }
        Ok(())
    })
}

/// Rotation matrix, row-major (points are rows: `P' = P·R`).
///
/// # Safety
/// `kernel` must be a live handle; `out` must have room for 9 doubles.
#[no_mangle]
pub unsafe extern "C" fn mvsc_kernel_matrix(
    kernel: *const MvscKernel,
    out: *mut f64,
) -> MvscStatus {
    guard(|| {
        let k = deref(kernel, "kernel")?;
        let dst = slice_mut(out, 9, "out")?;
        for (d, v) in dst.iter_mut().zip(k.inner.spec.matrix.iter().flatten()) {
            *d = *v;
        }
        Ok(())
    })
}

/// # Safety
/// `kernel` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_kernel_lattice_exact(kernel: *const MvscKernel) -> bool {
    kernel.as_ref().is_some_and(|k| k.inner.lattice_exact())
}

/// # Safety
/// `kernel` must be a handle from this library (or null) and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsc_kernel_free(kernel: *mut MvscKernel) {
    release(kernel)
}

// ---- metrics ----

/// Binary completion metrics over `n` voxels; masks are 0/1 bytes.
///
/// # Safety
/// The three buffers must hold `n` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_sc_metrics(
    pred: *const u8,
    gt: *const u8,
    mask: *const u8,
    n: usize,
    out: *mut MvscScMetrics,
) -> MvscStatus {
    guard(|| {
        let m = sc_metrics(
            &bools(slice(pred, n, "pred")?),
            &bools(slice(gt, n, "gt")?),
            &bools(slice(mask, n, "mask")?),
        )?;
        *deref_mut(out, "out")? = MvscScMetrics {
            precision: m.precision,
            recall: m.recall,
            iou: m.iou,
            tp: m.tp as u64,
            fp: m.fp as u64,
            fn_: m.fn_ as u64,
        };
        Ok(())
    })
}

/// Per-class IoU into `per_class` (`num_classes` doubles, NaN where a class
/// is left out, index 0 always NaN) and the mean into `mean_iou`.
///
/// # Safety
/// `pred`, `gt` and `mask` must hold `n` values; `per_class` must hold
/// `num_classes` doubles or be null; `mean_iou` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_ssc_metrics(
    pred: *const u32,
    gt: *const u32,
    mask: *const u8,
    n: usize,
    num_classes: usize,
    per_class: *mut f64,
    mean_iou: *mut f64,
) -> MvscStatus {
    guard(|| {
        let m = ssc_metrics(
            &labels_in(slice(pred, n, "pred")?),
            &labels_in(slice(gt, n, "gt")?),
            &bools(slice(mask, n, "mask")?),
            num_classes,
        )?;
        if !per_class.is_null() {
            let dst = slice_mut(per_class, num_classes, "per_class")?;
            dst.fill(f64::NAN);
            for (&c, &v) in &m.per_class_iou {
                dst[c] = v;
            }
        }
        *deref_mut(mean_iou, "mean_iou")? = m.mean_iou;
        Ok(())
    })
}

// ---- scenes ----

/// Synthetic scene of extents `h×w×d`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_scene_generate(
    seed: u64,
    h: usize,
    w: usize,
    d: usize,
    num_classes: usize,
    box_count: usize,
    out: *mut *mut MvscScene,
) -> MvscStatus {
    guard(|| {
        let params = SceneParams {
            extents: [h, w, d],
            num_classes,
            box_count,
            label_noise: SceneConfig::default().label_noise,
        };
        let (inner, _) = generate_scene_with_attempts(&params, seed)?;
        put(out, MvscScene { inner })
    })
}

/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_scene_load(
    dir: *const c_char,
    out: *mut *mut MvscScene,
) -> MvscStatus {
    guard(|| {
        let (inner, _) = load_scene(&path(dir)?)?;
        put(out, MvscScene { inner })
    })
}

/// Writes the scene directory (CVST volumes plus `scene.json`).
///
/// # Safety
/// `scene` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvsc_scene_save(
    scene: *const MvscScene,
    dir: *const c_char,
    seed: u64,
) -> MvscStatus {
    guard(|| {
        let s = deref(scene, "scene")?;
        let origin = SceneOrigin {
            seed,
            attempts: 0,
            box_count: 0,
            label_noise: 0.0,
        };
        save_scene(&path(dir)?, &s.inner, &origin)?;
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle; `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn mvsc_scene_extents(
    scene: *const MvscScene,
    out: *mut usize,
) -> MvscStatus {
    guard(|| {
        let s = deref(scene, "scene")?;
        slice_mut(out, 3, "out")?.copy_from_slice(&s.inner.extents);
        Ok(())
    })
}

/// Ground-truth labels, one per voxel; ignored voxels read `MVSC_IGNORE_LABEL`.
///
/// # Safety
/// `scene` must be a live handle; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mvsc_scene_labels(
    scene: *const MvscScene,
    out: *mut u32,
    cap: usize,
) -> MvscStatus {
    guard(|| {
        let s = deref(scene, "scene")?;
        let n = s.inner.voxels();
        if cap < n {
            return Err(invalid(format!(
                "label buffer holds {cap}, scene has {n} voxels"
            )));
        }
        labels_out(&s.inner.training_labels(), slice_mut(out, n, "out")?);
        Ok(())
    })
}

/// # Safety
/// `scene` must be a handle from this library (or null) and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsc_scene_free(scene: *mut MvscScene) {
    release(scene)
}

// ---- models ----

/// Builds a model from a JSON model config, or from the named preset
/// (`toy`, `full`) when `config_json` is null.
///
/// # Safety
/// `config_json` and `preset` must be NUL-terminated strings or null;
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_model_new(
    config_json: *const c_char,
    preset: *const c_char,
    out: *mut *mut MvscModel,
) -> MvscStatus {
    guard(|| {
        let cfg = if !config_json.is_null() {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| invalid("config is not valid UTF-8"))?;
            serde_json::from_str::<ModelConfig>(text).map_err(Error::from)?
        } else {
            let name = if preset.is_null() {
                "toy"
            } else {
                CStr::from_ptr(preset)
                    .to_str()
                    .map_err(|_| invalid("preset is not valid UTF-8"))?
            };
            ModelConfig::preset(name)?
        };
        cfg.validate()?;
        put(
            out,
            MvscModel {
                inner: Model::new(&cfg)?,
            },
        )
    })
}

/// Logits of shape `H×W×D×classes` as a new tensor.
///
/// # Safety
/// `model` and `scene` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mvsc_model_forward(
    model: *const MvscModel,
    scene: *const MvscScene,
    out: *mut *mut MvscTensor,
) -> MvscStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let s = deref(scene, "scene")?;
        put(
            out,
            MvscTensor {
                inner: m.inner.forward(&s.inner)?,
            },
        )
    })
}

/// Arg-max class per voxel.
///
/// # Safety
/// `model` and `scene` must be live handles; `out` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mvsc_model_predict(
    model: *const MvscModel,
    scene: *const MvscScene,
    out: *mut u32,
    cap: usize,
) -> MvscStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let s = deref(scene, "scene")?;
        let n = s.inner.voxels();
        if cap < n {
            return Err(invalid(format!(
                "label buffer holds {cap}, scene has {n} voxels"
            )));
        }
        labels_out(&m.inner.predict(&s.inner)?, slice_mut(out, n, "out")?);
        Ok(())
    })
}

/// Runs `steps` SGD steps on the scene and stores the final loss.
///
/// # Safety
/// `model` and `scene` must be live handles; `final_loss` writable or null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_model_train(
    model: *mut MvscModel,
    scene: *const MvscScene,
    steps: usize,
    lr: f64,
    momentum: f64,
    final_loss: *mut f64,
) -> MvscStatus {
    guard(|| {
        let m = deref_mut(model, "model")?;
        let s = deref(scene, "scene")?;
        let cfg = TrainConfig {
            steps,
            lr,
            momentum,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        let log = train(&mut m.inner, std::slice::from_ref(&s.inner), &cfg)?;
        if let Some(l) = final_loss.as_mut() {
            *l = log.final_loss;
        }
        Ok(())
    })
}

/// Scores the model's predictions on the scene.
///
/// # Safety
/// `model` and `scene` must be live handles; `out` must be writable;
/// `per_class` must hold the model's class count or be null.
#[no_mangle]
pub unsafe extern "C" fn mvsc_model_evaluate(
    model: *const MvscModel,
    scene: *const MvscScene,
    out: *mut MvscMetricSummary,
    per_class: *mut f64,
) -> MvscStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let s = deref(scene, "scene")?;
        let r = evaluate(&m.inner.predict(&s.inner)?, &s.inner)?;
        if !per_class.is_null() {
            let dst = slice_mut(per_class, s.inner.num_classes, "per_class")?;
            dst.fill(f64::NAN);
            for (&c, &v) in &r.per_class_iou {
                if let Some(d) = dst.get_mut(c) {
                    *d = v;
                }
            }
        }
        *deref_mut(out, "out")? = MvscMetricSummary {
            sc_precision: r.sc_precision,
            sc_recall: r.sc_recall,
            sc_iou: r.sc_iou,
            mean_iou: r.mean_iou,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be a handle from this library (or null) and not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mvsc_model_free(model: *mut MvscModel) {
    release(model)
}
