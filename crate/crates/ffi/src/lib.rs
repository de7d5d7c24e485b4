//! C ABI over the `fefa` toolkit.
//!
//! Every fallible function returns a [`FefaStatus`]; on failure the message
//! is available from [`fefa_last_error`] on the same thread until the next
//! call. Models are opaque handles created by [`fefa_model_load`] and
//! released with [`fefa_model_free`]. Output buffers are caller-allocated.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fefa::audio::{add_noise, FrontEnd, NoiseKind, NoiseSpec, Waveform};
use fefa::backbone::SpeakerModel;
use fefa::harness::load_with_frontend;
use fefa::metrics::{compute_eer, cosine_score, TrialLabel, TrialScores};
use fefa::Error;

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FefaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Shape = 4,
    UtteranceTooShort = 5,
    SilentSignal = 6,
    EerUndefined = 7,
    UnsupportedAudio = 8,
    Config = 9,
    Checkpoint = 10,
    Io = 11,
    Format = 12,
    BufferTooSmall = 13,
    Panic = 14,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FefaNoise {
    Gaussian = 0,
    Uniform = 1,
}

/// A trained speaker model with the front end it was trained on.
pub struct FefaModel {
    model: SpeakerModel,
    frontend: FrontEnd,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> FefaStatus {
    match e {
        Error::UtteranceTooShort { .. } => FefaStatus::UtteranceTooShort,
        Error::SilentSignal => FefaStatus::SilentSignal,
        Error::Shape { .. } => FefaStatus::Shape,
        Error::InvalidArgument(_) => FefaStatus::InvalidArgument,
        Error::EerUndefined(_) => FefaStatus::EerUndefined,
        Error::UnsupportedAudio(_) => FefaStatus::UnsupportedAudio,
        Error::Config(_) => FefaStatus::Config,
        Error::Checkpoint(_) => FefaStatus::Checkpoint,
        Error::Io { .. } => FefaStatus::Io,
        Error::Wav(_) | Error::Json(_) => FefaStatus::Format,
    }
}

struct Fail(FefaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FefaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FefaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FefaStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(FefaStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn copy_out(src: &[f64], out: &mut [f64]) -> Result<(), Fail> {
    if out.len() < src.len() {
        return Err(Fail(
            FefaStatus::BufferTooSmall,
            format!("output holds {} values, need {}", out.len(), src.len()),
        ));
    }
    out[..src.len()].copy_from_slice(src);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fefa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn fefa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fefa_model_load(path: *const c_char, out: *mut *mut FefaModel) -> FefaStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|e| Fail(FefaStatus::InvalidUtf8, e.to_string()))?;
        let (model, frontend) = load_with_frontend(Path::new(path))?;
        *out = Box::into_raw(Box::new(FefaModel { model, frontend }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`fefa_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fefa_model_free(model: *mut FefaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fefa_model_embedding_dim(model: *const FefaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.embedding_dim)
}

/// Frequency bins of the network input, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fefa_model_input_bins(model: *const FefaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.input_bins)
}

/// Number of attention layers, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fefa_model_attention_layers(model: *const FefaModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.fefa_layer_count())
}

/// Speaker embedding of one utterance into `out[0..embedding_dim]`.
///
/// # Safety
/// `model` must be a live handle, `samples` must hold `len` values and `out`
/// must hold `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn fefa_model_embed(
    model: *const FefaModel,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
) -> FefaStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail(FefaStatus::NullPointer, "model is null".into()))?;
        let wave = Waveform::new(slice(samples, len, "samples")?.to_vec(), sample_rate);
        let features = m.frontend.features(&wave)?;
        let inf = m.model.infer(&[&features])?;
        copy_out(&inf.embeddings[0], slice_mut(out, out_len, "out")?)
    })
}

/// Input-layer attention probabilities of one utterance into
/// `out[0..input_bins]`.
///
/// # Safety
/// As for [`fefa_model_embed`].
#[no_mangle]
pub unsafe extern "C" fn fefa_model_input_attention(
    model: *const FefaModel,
    samples: *const f64,
    len: usize,
    sample_rate: u32,
    out: *mut f64,
    out_len: usize,
) -> FefaStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail(FefaStatus::NullPointer, "model is null".into()))?;
        let wave = Waveform::new(slice(samples, len, "samples")?.to_vec(), sample_rate);
        let features = m.frontend.features(&wave)?;
        let p = m
            .model
            .infer(&[&features])?
            .input_attention
            .and_then(|mut v| v.pop())
            .ok_or(Fail(FefaStatus::InvalidArgument, "model has no input attention layer".into()))?;
        copy_out(&p, slice_mut(out, out_len, "out")?)
    })
}

/// Cosine similarity of two vectors of length `len`.
///
/// # Safety
/// `a` and `b` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fefa_cosine_score(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> FefaStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = cosine_score(slice(a, len, "a")?, slice(b, len, "b")?)?;
        Ok(())
    })
}

/// Equal error rate of `n` scores; `is_target[i]` nonzero marks a target
/// trial. `threshold` may be null.
///
/// # Safety
/// `scores` and `is_target` must hold `n` values; `eer` must be valid.
#[no_mangle]
pub unsafe extern "C" fn fefa_compute_eer(
    scores: *const f64,
    is_target: *const u8,
    n: usize,
    eer: *mut f64,
    threshold: *mut f64,
) -> FefaStatus {
    guard(|| {
        non_null(eer, "eer")?;
        let s = slice(scores, n, "scores")?;
        let t = slice(is_target, n, "is_target")?;
        let entries = s
            .iter()
            .zip(t)
            .map(|(&s, &t)| (if t != 0 { TrialLabel::Target } else { TrialLabel::NonTarget }, s))
            .collect();
        let (e, th) = compute_eer(&TrialScores::new(entries))?;
        *eer = e;
        if !threshold.is_null() {
            *threshold = th;
        }
        Ok(())
    })
}

/// Adds seeded noise at `snr_db` to `len` samples, writing `out[0..len]`.
/// `out` may alias `samples`.
///
/// # Safety
/// `samples` and `out` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn fefa_add_noise(
    samples: *const f64,
    len: usize,
    kind: FefaNoise,
    snr_db: f64,
    seed: u64,
    out: *mut f64,
) -> FefaStatus {
    guard(|| {
        let wave = Waveform::new(slice(samples, len, "samples")?.to_vec(), fefa::audio::STANDARD_SAMPLE_RATE);
        let dist = match kind {
            FefaNoise::Gaussian => NoiseKind::Gaussian,
            FefaNoise::Uniform => NoiseKind::Uniform,
        };
        let noisy = add_noise(&wave, &NoiseSpec::new(dist, snr_db), seed)?;
        copy_out(&noisy.samples, slice_mut(out, len, "out")?)
    })
}
