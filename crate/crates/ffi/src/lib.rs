//! C ABI over `emt-core`.
//!
//! Every function returns an [`EmtStatus`]; on failure a message is kept in
//! thread-local storage and read with [`emt_last_error`]. Model handles are
//! opaque and must stay on the thread that created them.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use emt_core::attention::ForwardCtx;
use emt_core::encoders::RawViews;
use emt_core::fusion::{count_macs, param_count, FusionConfig, Strategy};
use emt_core::metrics::{auilc, evaluate};
use emt_core::model::{Checkpoint, Model};
use emt_core::nn::Parameterized;
use emt_core::{Error, RngState, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Io = 5,
    Checkpoint = 6,
    NonFinite = 7,
    Panic = 8,
    Other = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmtStrategy {
    Ooll = 0,
    Oall = 1,
    Oagl = 2,
}

pub const EMT_SHARE_MPU: u32 = 1;
pub const EMT_SHARE_MODALITY: u32 = 2;
pub const EMT_SHARE_LAYER: u32 = 4;

/// Fusion shape used by the counting functions.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct EmtFusionShape {
    pub strategy: EmtStrategy,
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub expansion: usize,
    /// Bitwise OR of the `EMT_SHARE_*` flags.
    pub share_flags: u32,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct EmtMetrics {
    pub mae: f64,
    pub corr: f64,
    /// NaN when the labels are not on the [-3, 3] scale.
    pub acc7: f64,
    pub acc5: f64,
    pub acc3: f64,
    pub acc2_nonneg: f64,
    pub acc2_pos: f64,
    pub f1_nonneg: f64,
    pub f1_pos: f64,
    /// 1 when either series is constant and `corr` was reported as 0.
    pub corr_degenerate: i32,
}

/// Opaque trained model.
pub struct EmtModel {
    model: Model,
    seed: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> EmtStatus {
    match e {
        Error::Shape { .. } | Error::FileShape { .. } => EmtStatus::Shape,
        Error::Config { .. } => EmtStatus::Config,
        Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } | Error::UnknownSample(_) => {
            EmtStatus::InvalidArgument
        }
        Error::Io { .. } | Error::MissingFile(_) | Error::NoManifest(_) => EmtStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => EmtStatus::Checkpoint,
        Error::NonFinite(_) | Error::NonFiniteData { .. } => EmtStatus::NonFinite,
        _ => EmtStatus::Other,
    }
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EmtStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            EmtStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            EmtStatus::InvalidArgument
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            EmtStatus::Panic
        }
    }
}

unsafe fn slice_in<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

fn fusion_config(shape: &EmtFusionShape) -> Result<FusionConfig, Failure> {
    let cfg = FusionConfig {
        strategy: match shape.strategy {
            EmtStrategy::Ooll => Strategy::Ooll,
            EmtStrategy::Oall => Strategy::Oall,
            EmtStrategy::Oagl => Strategy::Oagl,
        },
        d: shape.d,
        layers: shape.layers,
        heads: shape.heads,
        expansion: shape.expansion,
        pool_hidden: shape.d,
        share_mpu: shape.share_flags & EMT_SHARE_MPU != 0,
        share_modality: shape.share_flags & EMT_SHARE_MODALITY != 0,
        share_layer: shape.share_flags & EMT_SHARE_LAYER != 0,
        ..FusionConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn emt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn emt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Fusion-module MACs of one forward pass over `n` modalities.
///
/// # Safety
/// `shape` and `out` must be valid pointers; `lengths` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn emt_count_macs(
    shape: *const EmtFusionShape,
    lengths: *const usize,
    n: usize,
    out: *mut u64,
) -> EmtStatus {
    guard(|| {
        let shape = shape.as_ref().ok_or(Failure::Null("shape"))?;
        let lengths = slice_in(lengths, n, "lengths")?;
        if n < 2 || lengths.contains(&0) {
            return Err(Failure::Invalid("need at least two modalities of positive length".into()));
        }
        let cfg = fusion_config(shape)?;
        *out_ref(out, "out")? = count_macs(&cfg, lengths);
        Ok(())
    })
}

/// Distinct trainable scalars of the fusion module; `mpu_out` may be NULL.
///
/// # Safety
/// `shape` and `total_out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn emt_param_count(
    shape: *const EmtFusionShape,
    modalities: usize,
    total_out: *mut usize,
    mpu_out: *mut usize,
) -> EmtStatus {
    guard(|| {
        let shape = shape.as_ref().ok_or(Failure::Null("shape"))?;
        if modalities < 2 {
            return Err(Failure::Invalid("need at least two modalities".into()));
        }
        let b = param_count(&fusion_config(shape)?, modalities);
        *out_ref(total_out, "total_out")? = b.total;
        if let Some(m) = mpu_out.as_mut() {
            *m = b.mpu;
        }
        Ok(())
    })
}

/// Trapezoidal area under a metric-vs-missing-rate curve.
///
/// # Safety
/// `rates` and `values` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn emt_auilc(rates: *const f64, values: *const f64, n: usize, out: *mut f64) -> EmtStatus {
    guard(|| {
        let r = slice_in(rates, n, "rates")?;
        let v = slice_in(values, n, "values")?;
        *out_ref(out, "out")? = auilc(r, v)?;
        Ok(())
    })
}

/// Regression and classification metrics on the [-3, 3] label scale.
///
/// # Safety
/// `preds` and `labels` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn emt_evaluate(
    preds: *const f64,
    labels: *const f64,
    n: usize,
    out: *mut EmtMetrics,
) -> EmtStatus {
    guard(|| {
        let p = slice_in(preds, n, "preds")?;
        let l = slice_in(labels, n, "labels")?;
        let r = evaluate(p, l)?;
        *out_ref(out, "out")? = EmtMetrics {
            mae: r.mae,
            corr: r.corr,
            acc7: r.acc7.unwrap_or(f64::NAN),
            acc5: r.acc5,
            acc3: r.acc3,
            acc2_nonneg: r.acc2_nonneg,
            acc2_pos: r.acc2_pos,
            f1_nonneg: r.f1_nonneg,
            f1_pos: r.f1_pos,
            corr_degenerate: r.corr_degenerate as i32,
        };
        Ok(())
    })
}

/// Loads a checkpoint written by `emt train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emt_model_load(path: *const c_char, out: *mut *mut EmtModel) -> EmtStatus {
    guard(|| {
        if path.is_null() {
            return Err(Failure::Null("path"));
        }
        let out = out_ref(out, "out")?;
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::Invalid("path is not UTF-8".into()))?;
        let ck = Checkpoint::load(Path::new(path))?;
        let model = Model::from_checkpoint(&ck)?;
        *out = Box::into_raw(Box::new(EmtModel { model, seed: ck.seed }));
        Ok(())
    })
}

/// Releases a model; NULL is ignored.
///
/// # Safety
/// `model` must come from [`emt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn emt_model_free(model: *mut EmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sequence lengths and feature widths the model expects.
///
/// # Safety
/// `model` must be a live handle; each out pointer may be NULL.
#[no_mangle]
pub unsafe extern "C" fn emt_model_dims(
    model: *const EmtModel,
    t_l: *mut usize,
    t_a: *mut usize,
    t_v: *mut usize,
    f_a: *mut usize,
    f_v: *mut usize,
) -> EmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let d = m.model.data_dims;
        for (p, v) in [(t_l, d.t_l), (t_a, d.t_a), (t_v, d.t_v), (f_a, d.f_a), (f_v, d.f_v)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Total trainable scalars of the loaded model.
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn emt_model_param_count(model: *const EmtModel, out: *mut usize) -> EmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        *out_ref(out, "out")? = m.model.param_count();
        Ok(())
    })
}

/// Sentiment score of one utterance. `audio` is `t_a × f_a` and `vision`
/// `t_v × f_v`, row-major; lengths must match [`emt_model_dims`].
///
/// # Safety
/// Buffers must hold the stated number of elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn emt_model_predict(
    model: *const EmtModel,
    tokens: *const u32,
    t_l: usize,
    audio: *const f64,
    t_a: usize,
    vision: *const f64,
    t_v: usize,
    out: *mut f64,
) -> EmtStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Failure::Null("model"))?;
        let dims = m.model.data_dims;
        if [t_l, t_a, t_v] != dims.lengths() {
            return Err(Failure::Invalid(format!(
                "lengths ({t_l}, {t_a}, {t_v}) do not match the model's {:?}",
                dims.lengths()
            )));
        }
        let tokens = slice_in(tokens, t_l, "tokens")?;
        let audio = slice_in(audio, t_a * dims.f_a, "audio")?;
        let vision = slice_in(vision, t_v * dims.f_v, "vision")?;
        let views = RawViews {
            tokens: tokens.to_vec(),
            audio: Tensor::matrix(t_a, dims.f_a, audio.to_vec())?,
            vision: Tensor::matrix(t_v, dims.f_v, vision.to_vec())?,
        };
        let mut rng = RngState::new(m.seed);
        let y = m.model.forward_view(&views, &mut ForwardCtx::eval(&mut rng))?.prediction.item();
        *out_ref(out, "out")? = y;
        Ok(())
    })
}
