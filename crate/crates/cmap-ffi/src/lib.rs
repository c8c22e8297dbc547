//! C ABI over the purification laboratory. The committed header
//! `include/cmap.h` is the caller-facing contract; a test keeps it in sync
//! with the exports here.
//!
//! Conventions, uniform across every entry point:
//!
//! - Handles (`CmapDataset`, `CmapModel`, `CmapClassifier`) are opaque heap
//!   pointers produced through `out` parameters and released by the matching
//!   `*_free`, which ignores null. No other function accepts null anywhere.
//! - Every fallible function returns a [`CmapStatus`]. On failure the
//!   thread-local message behind [`cmap_last_error`] describes what went
//!   wrong; it stays valid until the next laboratory call on that thread.
//! - Configuration crosses the boundary as UTF-8 JSON in the library's own
//!   schemas, where `"{}"` means defaults and unknown keys are rejected.
//! - Samples are row-major `double` buffers described by an explicit shape;
//!   the caller allocates, and sizes are validated before any write.
//! - Randomness is keyed, never ambient: callers pass a seed (and for the
//!   defense a lane), and equal keys reproduce results bit for bit.
//! - Panics never unwind across the boundary; they surface as
//!   `CMAP_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::slice;

use cmap_core::attack::{attack_classifier, PgdConfig};
use cmap_core::classifier::{
    load_clf, predict, save_clf, train_clf, ClfParams, ClfTrainConfig,
};
use cmap_core::cm::{
    cm_generate, load_cm, save_cm, train_consistency, CmParams, CmTrainConfig, NoiseSchedule,
};
use cmap_core::data::{
    gen_gaussian, gen_shape_images, load_dataset, save_dataset, Dataset, GaussianSpec,
    ShapeImageSpec,
};
use cmap_core::experiment::setup::streams;
use cmap_core::purify::{purify_predict, PurifyConfig};
use cmap_core::rng::StreamKey;
use cmap_core::tensor::Tensor;
use cmap_core::theory::{verify_bound, verify_theorem1, BoundConfig, TheoremConfig};
use cmap_core::Error;

type FfiResult<T> = Result<T, Error>;

/// Outcome of a call. Everything except `Ok` leaves a message behind;
/// retrieve it with cmap_last_error().
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmapStatus {
    Ok = 0,
    /// A required pointer was null.
    NullArgument = 1,
    /// Malformed JSON, bad shapes or sizes, out-of-range indices.
    InvalidArgument = 2,
    /// The filesystem failed underneath a save or load.
    Io = 3,
    /// The computation produced non-finite values or diverged.
    Numeric = 4,
    /// A defect: a panic was caught at the boundary.
    Internal = 5,
}

/// A labeled sample collection.
pub struct CmapDataset(Dataset);
/// A consistency generator (trained network or analytic Gaussian map).
pub struct CmapModel(CmParams);
/// An input-standardizing MLP classifier.
pub struct CmapClassifier(ClfParams);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let clean = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> CmapStatus {
    match err {
        Error::Io(_) => CmapStatus::Io,
        Error::NonFinite { .. } | Error::Diverged { .. } => CmapStatus::Numeric,
        _ => CmapStatus::InvalidArgument,
    }
}

fn null_arg(name: &str) -> CmapStatus {
    set_error(format!("{name} must not be null"));
    CmapStatus::NullArgument
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

/// Runs `body`, stores the outcome message, and maps it to a status.
fn guard(body: impl FnOnce() -> FfiResult<()>) -> CmapStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            CmapStatus::Ok
        }
        Ok(Err(e)) => {
            let code = status_of(&e);
            set_error(e.to_string());
            code
        }
        Err(_) => {
            set_error("internal panic".to_string());
            CmapStatus::Internal
        }
    }
}

/// Like [`guard`], but boxes the produced handle into `out` on success and
/// nulls `out` on failure. `out` itself was null-checked by the caller.
fn emit<H>(out: *mut *mut H, make: impl FnOnce() -> FfiResult<H>) -> CmapStatus {
    unsafe { *out = std::ptr::null_mut() };
    guard(|| {
        let handle = make()?;
        unsafe { *out = Box::into_raw(Box::new(handle)) };
        Ok(())
    })
}

/// Like [`guard`], but writes the produced value through `out` on success.
fn emit_value<T>(out: *mut T, make: impl FnOnce() -> FfiResult<T>) -> CmapStatus {
    guard(|| {
        let value = make()?;
        unsafe { *out = value };
        Ok(())
    })
}

/// Borrows a UTF-8 string; the pointer was null-checked by the caller.
fn cstr<'a>(ptr: *const c_char, name: &str) -> FfiResult<&'a str> {
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| invalid(format!("{name} must be valid UTF-8")))
}

fn from_json<T: serde::de::DeserializeOwned>(ptr: *const c_char, name: &str) -> FfiResult<T> {
    Ok(serde_json::from_str(cstr(ptr, name)?)?)
}

/// Copies a shaped row-major buffer into a tensor. Pointers were
/// null-checked by the caller.
fn tensor_from(data: *const f64, shape: *const usize, ndim: usize) -> FfiResult<Tensor> {
    if ndim == 0 {
        return Err(invalid("shape needs at least one dimension"));
    }
    let dims = unsafe { slice::from_raw_parts(shape, ndim) }.to_vec();
    if dims.iter().any(|&d| d == 0) {
        return Err(invalid("shape dimensions must be positive"));
    }
    let len: usize = dims.iter().product();
    let values = unsafe { slice::from_raw_parts(data, len) }.to_vec();
    Tensor::from_vec(dims, values)
}

/// Copies a tensor into a caller buffer that must hold exactly its length.
fn write_tensor(t: &Tensor, buf: *mut f64) {
    unsafe { slice::from_raw_parts_mut(buf, t.len()) }.copy_from_slice(t.data());
}

// ---------------------------------------------------------------------------
// Library identity and diagnostics
// ---------------------------------------------------------------------------

/// Version of the laboratory, as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread; empty after a
/// successful call. Valid until the next laboratory call on the thread.
#[no_mangle]
pub extern "C" fn cmap_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Generates a Gaussian-mixture dataset from a `GaussianSpec` JSON document.
#[no_mangle]
pub extern "C" fn cmap_dataset_gen_gaussian(
    spec_json: *const c_char,
    out: *mut *mut CmapDataset,
) -> CmapStatus {
    if spec_json.is_null() {
        return null_arg("spec_json");
    }
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        let spec: GaussianSpec = from_json(spec_json, "spec_json")?;
        Ok(CmapDataset(gen_gaussian(&spec)?))
    })
}

/// Generates the synthetic shape-image dataset from a `ShapeImageSpec`
/// JSON document.
#[no_mangle]
pub extern "C" fn cmap_dataset_gen_shapes(
    spec_json: *const c_char,
    out: *mut *mut CmapDataset,
) -> CmapStatus {
    if spec_json.is_null() {
        return null_arg("spec_json");
    }
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        let spec: ShapeImageSpec = from_json(spec_json, "spec_json")?;
        Ok(CmapDataset(gen_shape_images(&spec)?))
    })
}

/// Archives a dataset into a directory (IDX samples plus JSON metadata).
#[no_mangle]
pub extern "C" fn cmap_dataset_save(ds: *const CmapDataset, dir: *const c_char) -> CmapStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if dir.is_null() {
        return null_arg("dir");
    }
    guard(|| save_dataset(&ds.0, Path::new(cstr(dir, "dir")?)))
}

/// Loads a dataset archived by [`cmap_dataset_save`].
#[no_mangle]
pub extern "C" fn cmap_dataset_load(dir: *const c_char, out: *mut *mut CmapDataset) -> CmapStatus {
    if dir.is_null() {
        return null_arg("dir");
    }
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        Ok(CmapDataset(load_dataset(Path::new(cstr(dir, "dir")?))?))
    })
}

/// Number of samples.
#[no_mangle]
pub extern "C" fn cmap_dataset_len(ds: *const CmapDataset, out: *mut usize) -> CmapStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if out.is_null() {
        return null_arg("out");
    }
    emit_value(out, || Ok(ds.0.len()))
}

/// Flattened length of one sample.
#[no_mangle]
pub extern "C" fn cmap_dataset_sample_dim(ds: *const CmapDataset, out: *mut usize) -> CmapStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if out.is_null() {
        return null_arg("out");
    }
    emit_value(out, || Ok(ds.0.sample_dim()))
}

/// Number of label classes.
#[no_mangle]
pub extern "C" fn cmap_dataset_class_count(ds: *const CmapDataset, out: *mut usize) -> CmapStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if out.is_null() {
        return null_arg("out");
    }
    emit_value(out, || Ok(ds.0.class_count))
}

/// Writes the per-sample shape into `shape_out` (up to `capacity` entries)
/// and its dimension count into `ndim_out`. Fails if `capacity` is too
/// small, reporting the required count in the message.
#[no_mangle]
pub extern "C" fn cmap_dataset_sample_shape(
    ds: *const CmapDataset,
    shape_out: *mut usize,
    capacity: usize,
    ndim_out: *mut usize,
) -> CmapStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if shape_out.is_null() {
        return null_arg("shape_out");
    }
    if ndim_out.is_null() {
        return null_arg("ndim_out");
    }
    guard(|| {
        let shape = ds.0.sample_shape();
        if shape.len() > capacity {
            return Err(invalid(format!(
                "shape has {} dimensions but capacity is {capacity}",
                shape.len()
            )));
        }
        unsafe {
            slice::from_raw_parts_mut(shape_out, shape.len()).copy_from_slice(&shape);
            *ndim_out = shape.len();
        }
        Ok(())
    })
}

/// Copies sample `index` (row-major, flattened) into `buf` and its label
/// into `label_out`. `buf_len` must equal the sample dimension.
#[no_mangle]
pub extern "C" fn cmap_dataset_sample(
    ds: *const CmapDataset,
    index: usize,
    buf: *mut f64,
    buf_len: usize,
    label_out: *mut usize,
) -> CmapStatus {
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if buf.is_null() {
        return null_arg("buf");
    }
    if label_out.is_null() {
        return null_arg("label_out");
    }
    guard(|| {
        if buf_len != ds.0.sample_dim() {
            return Err(invalid(format!(
                "buffer holds {buf_len} values but samples have {}",
                ds.0.sample_dim()
            )));
        }
        let sample = ds.0.sample(index)?;
        write_tensor(&sample, buf);
        unsafe { *label_out = ds.0.labels[index] };
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
#[no_mangle]
pub extern "C" fn cmap_dataset_free(ds: *mut CmapDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

// ---------------------------------------------------------------------------
// Consistency generator
// ---------------------------------------------------------------------------

/// Trains a consistency generator on the dataset's samples. `config_json`
/// is a `CmTrainConfig` document; the seed keys the training stream.
#[no_mangle]
pub extern "C" fn cmap_model_train(
    config_json: *const c_char,
    ds: *const CmapDataset,
    seed: u64,
    out: *mut *mut CmapModel,
) -> CmapStatus {
    if config_json.is_null() {
        return null_arg("config_json");
    }
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        let cfg: CmTrainConfig = from_json(config_json, "config_json")?;
        let mut draws = StreamKey::new(seed, streams::TRAIN_CM).draws();
        let (params, _) = train_consistency(&cfg, &ds.0.samples, &mut draws)?;
        Ok(CmapModel(params))
    })
}

/// Builds the closed-form generator for an isotropic Gaussian with center
/// `mu` (length `dim`) and scale `sigma_x`. `schedule_json` is a
/// `NoiseSchedule` document.
#[no_mangle]
pub extern "C" fn cmap_model_analytic(
    schedule_json: *const c_char,
    mu: *const f64,
    dim: usize,
    sigma_x: f64,
    out: *mut *mut CmapModel,
) -> CmapStatus {
    if schedule_json.is_null() {
        return null_arg("schedule_json");
    }
    if mu.is_null() {
        return null_arg("mu");
    }
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let schedule: NoiseSchedule = from_json(schedule_json, "schedule_json")?;
        let center = Tensor::vector(unsafe { slice::from_raw_parts(mu, dim) }.to_vec())?;
        Ok(CmapModel(CmParams::analytic(schedule, center, sigma_x)?))
    })
}

/// Saves a generator snapshot to a JSON file.
#[no_mangle]
pub extern "C" fn cmap_model_save(m: *const CmapModel, path: *const c_char) -> CmapStatus {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return null_arg("m");
    };
    if path.is_null() {
        return null_arg("path");
    }
    guard(|| save_cm(&m.0, Path::new(cstr(path, "path")?)))
}

/// Loads a generator snapshot saved by [`cmap_model_save`].
#[no_mangle]
pub extern "C" fn cmap_model_load(path: *const c_char, out: *mut *mut CmapModel) -> CmapStatus {
    if path.is_null() {
        return null_arg("path");
    }
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || Ok(CmapModel(load_cm(Path::new(cstr(path, "path")?))?)))
}

/// One-step generation from a latent at the top noise scale. `z` and
/// `out_buf` both hold `prod(shape)` values.
#[no_mangle]
pub extern "C" fn cmap_model_generate(
    m: *const CmapModel,
    z: *const f64,
    shape: *const usize,
    ndim: usize,
    out_buf: *mut f64,
) -> CmapStatus {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return null_arg("m");
    };
    if z.is_null() {
        return null_arg("z");
    }
    if shape.is_null() {
        return null_arg("shape");
    }
    if out_buf.is_null() {
        return null_arg("out_buf");
    }
    guard(|| {
        let latent = tensor_from(z, shape, ndim)?;
        let generated = cm_generate(&m.0, &latent)?;
        write_tensor(&generated, out_buf);
        Ok(())
    })
}

/// Releases a generator. Null is ignored.
#[no_mangle]
pub extern "C" fn cmap_model_free(m: *mut CmapModel) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Trains the MLP classifier on a dataset. `config_json` is a
/// `ClfTrainConfig` document; the seed keys the training stream.
#[no_mangle]
pub extern "C" fn cmap_classifier_train(
    config_json: *const c_char,
    ds: *const CmapDataset,
    seed: u64,
    out: *mut *mut CmapClassifier,
) -> CmapStatus {
    if config_json.is_null() {
        return null_arg("config_json");
    }
    let Some(ds) = (unsafe { ds.as_ref() }) else {
        return null_arg("ds");
    };
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        let cfg: ClfTrainConfig = from_json(config_json, "config_json")?;
        let mut draws = StreamKey::new(seed, streams::TRAIN_CLF).draws();
        let (params, _) = train_clf(&cfg, &ds.0, &mut draws)?;
        Ok(CmapClassifier(params))
    })
}

/// Saves a classifier snapshot to a JSON file.
#[no_mangle]
pub extern "C" fn cmap_classifier_save(
    c: *const CmapClassifier,
    path: *const c_char,
) -> CmapStatus {
    let Some(c) = (unsafe { c.as_ref() }) else {
        return null_arg("c");
    };
    if path.is_null() {
        return null_arg("path");
    }
    guard(|| save_clf(&c.0, Path::new(cstr(path, "path")?)))
}

/// Loads a classifier snapshot saved by [`cmap_classifier_save`].
#[no_mangle]
pub extern "C" fn cmap_classifier_load(
    path: *const c_char,
    out: *mut *mut CmapClassifier,
) -> CmapStatus {
    if path.is_null() {
        return null_arg("path");
    }
    if out.is_null() {
        return null_arg("out");
    }
    emit(out, || {
        Ok(CmapClassifier(load_clf(Path::new(cstr(path, "path")?))?))
    })
}

/// Number of classes the classifier separates.
#[no_mangle]
pub extern "C" fn cmap_classifier_class_count(
    c: *const CmapClassifier,
    out: *mut usize,
) -> CmapStatus {
    let Some(c) = (unsafe { c.as_ref() }) else {
        return null_arg("c");
    };
    if out.is_null() {
        return null_arg("out");
    }
    emit_value(out, || Ok(c.0.class_count))
}

/// Predicted label for one shaped sample.
#[no_mangle]
pub extern "C" fn cmap_classifier_predict(
    c: *const CmapClassifier,
    x: *const f64,
    shape: *const usize,
    ndim: usize,
    label_out: *mut usize,
) -> CmapStatus {
    let Some(c) = (unsafe { c.as_ref() }) else {
        return null_arg("c");
    };
    if x.is_null() {
        return null_arg("x");
    }
    if shape.is_null() {
        return null_arg("shape");
    }
    if label_out.is_null() {
        return null_arg("label_out");
    }
    emit_value(label_out, || predict(&c.0, &tensor_from(x, shape, ndim)?))
}

/// Releases a classifier. Null is ignored.
#[no_mangle]
pub extern "C" fn cmap_classifier_free(c: *mut CmapClassifier) {
    if !c.is_null() {
        drop(unsafe { Box::from_raw(c) });
    }
}

// ---------------------------------------------------------------------------
// Attack and defense
// ---------------------------------------------------------------------------

/// Runs projected gradient descent against the classifier from sample `x`
/// with true label `label`. `config_json` is a `PgdConfig` document;
/// `adv_out` receives `prod(shape)` values. Deterministic.
#[no_mangle]
pub extern "C" fn cmap_attack_classifier(
    c: *const CmapClassifier,
    config_json: *const c_char,
    x: *const f64,
    shape: *const usize,
    ndim: usize,
    label: usize,
    adv_out: *mut f64,
) -> CmapStatus {
    let Some(c) = (unsafe { c.as_ref() }) else {
        return null_arg("c");
    };
    if config_json.is_null() {
        return null_arg("config_json");
    }
    if x.is_null() {
        return null_arg("x");
    }
    if shape.is_null() {
        return null_arg("shape");
    }
    if adv_out.is_null() {
        return null_arg("adv_out");
    }
    guard(|| {
        let cfg: PgdConfig = from_json(config_json, "config_json")?;
        let clean = tensor_from(x, shape, ndim)?;
        let adv = attack_classifier(&cfg, &c.0, &clean, label)?;
        write_tensor(&adv, adv_out);
        Ok(())
    })
}

/// Purifies one shaped sample through the generator and votes the
/// classifier over the restored population. `config_json` is a
/// `PurifyConfig` document. The `(seed, lane)` pair keys the defense
/// randomness: equal keys reproduce the vote bit for bit, distinct lanes
/// decorrelate samples.
#[no_mangle]
pub extern "C" fn cmap_purify_predict(
    m: *const CmapModel,
    c: *const CmapClassifier,
    config_json: *const c_char,
    x: *const f64,
    shape: *const usize,
    ndim: usize,
    seed: u64,
    lane: u64,
    label_out: *mut usize,
) -> CmapStatus {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return null_arg("m");
    };
    let Some(c) = (unsafe { c.as_ref() }) else {
        return null_arg("c");
    };
    if config_json.is_null() {
        return null_arg("config_json");
    }
    if x.is_null() {
        return null_arg("x");
    }
    if shape.is_null() {
        return null_arg("shape");
    }
    if label_out.is_null() {
        return null_arg("label_out");
    }
    emit_value(label_out, || {
        let cfg: PurifyConfig = from_json(config_json, "config_json")?;
        let sample = tensor_from(x, shape, ndim)?;
        let key = StreamKey::new(seed, streams::DEFENSE).child(lane);
        let (prediction, _) = purify_predict(&m.0, &c.0, &cfg, &sample, &key)?;
        Ok(prediction.label)
    })
}

// ---------------------------------------------------------------------------
// Closed-form verification gates
// ---------------------------------------------------------------------------

/// Monte-Carlo check of the restoration-gap statistics against their
/// closed forms. `config_json` is a `TheoremConfig` document; `pass_out`
/// receives whether every gate held.
#[no_mangle]
pub extern "C" fn cmap_check_restoration_statistics(
    config_json: *const c_char,
    pass_out: *mut bool,
) -> CmapStatus {
    if config_json.is_null() {
        return null_arg("config_json");
    }
    if pass_out.is_null() {
        return null_arg("pass_out");
    }
    emit_value(pass_out, || {
        let cfg: TheoremConfig = from_json(config_json, "config_json")?;
        Ok(verify_theorem1(&cfg)?.pass)
    })
}

/// Checks the reconstruction bound on randomized instances. `config_json`
/// is a `BoundConfig` document; `pass_out` receives whether no instance
/// violated the bound.
#[no_mangle]
pub extern "C" fn cmap_check_reconstruction_bound(
    config_json: *const c_char,
    pass_out: *mut bool,
) -> CmapStatus {
    if config_json.is_null() {
        return null_arg("config_json");
    }
    if pass_out.is_null() {
        return null_arg("pass_out");
    }
    emit_value(pass_out, || {
        let cfg: BoundConfig = from_json(config_json, "config_json")?;
        Ok(verify_bound(&cfg)?.violations == 0)
    })
}
