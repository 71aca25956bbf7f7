//! C ABI over the `lasr` core library.
//!
//! Every fallible function returns a [`LasrStatus`]; on failure the message is
//! kept per thread and can be fetched with [`lasr_last_error_message`].
//! Corpora and models are opaque handles released with their `_free`
//! function. Output buffers are caller-allocated; a too-small buffer is an
//! `LASR_STATUS_BUFFER_TOO_SMALL` error and nothing is written.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lasr::diffkit::Tensor;
use lasr::encoder::{embed_utterances, Checkpoint, EncoderParams};
use lasr::evalkit::eer_from_scores;
use lasr::experiment::ExperimentConfig;
use lasr::langsim::{read_corpus, write_corpus, Corpus, Split};
use lasr::objectives::angular_distance;
use lasr::trainer::{lr_schedule, posteriors};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LasrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Compute = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LasrSplit {
    Pretrain = 0,
    FinetuneTrain = 1,
    Dev = 2,
    Test = 3,
}

impl From<LasrSplit> for Split {
    fn from(s: LasrSplit) -> Self {
        match s {
            LasrSplit::Pretrain => Split::Pretrain,
            LasrSplit::FinetuneTrain => Split::FinetuneTrain,
            LasrSplit::Dev => Split::Dev,
            LasrSplit::Test => Split::Test,
        }
    }
}

/// Metadata of one utterance; `label` is -1 for an unlabeled utterance.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LasrUtteranceInfo {
    pub utterance_id: u64,
    pub num_frames: usize,
    pub feature_dim: usize,
    pub label: i64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LasrModelDims {
    pub feature_dim: usize,
    pub context: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

/// Opaque synthetic corpus.
pub struct LasrCorpus(Corpus);

/// Opaque encoder with its classifier head.
pub struct LasrModel(EncoderParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LasrStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(LasrStatus::NullPointer, format!("{what} is null"))
    }

    fn invalid(msg: impl Into<String>) -> Self {
        Failure(LasrStatus::InvalidArgument, msg.into())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LasrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LasrStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            LasrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, needed: usize) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure::null("output buffer"));
    }
    if len < needed {
        return Err(Failure(
            LasrStatus::BufferTooSmall,
            format!("output buffer holds {len} values, {needed} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("out"));
    }
    out.write(value);
    Ok(())
}

fn load_config(path: PathBuf) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(&path).map_err(|e| Failure(LasrStatus::Format, e.to_string()))
}

/// Copies the calling thread's last error message; free it with
/// [`lasr_string_free`]. Returns null when no error has been recorded.
#[no_mangle]
pub extern "C" fn lasr_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(c) => c.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lasr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds the corpus described by the experiment config at `config_path`.
///
/// # Safety
/// `config_path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_generate(config_path: *const c_char, out: *mut *mut LasrCorpus) -> LasrStatus {
    guard(|| {
        let cfg = load_config(path_arg(config_path, "config_path")?)?;
        let corpus = cfg
            .build_corpus()
            .map_err(|e| Failure(LasrStatus::InvalidArgument, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(LasrCorpus(corpus))))
    })
}

/// # Safety
/// `dir` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_load(dir: *const c_char, out: *mut *mut LasrCorpus) -> LasrStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let corpus = read_corpus(&dir).map_err(|e| Failure(LasrStatus::Io, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(LasrCorpus(corpus))))
    })
}

/// # Safety
/// `corpus` must be a live handle and `dir` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_save(corpus: *const LasrCorpus, dir: *const c_char) -> LasrStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| Failure::null("corpus"))?;
        let dir = path_arg(dir, "dir")?;
        write_corpus(&corpus.0, &dir).map_err(|e| Failure(LasrStatus::Io, e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `corpus` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_free(corpus: *mut LasrCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_split_len(corpus: *const LasrCorpus, split: LasrSplit, out: *mut usize) -> LasrStatus {
    guard(|| {
        let corpus = corpus.as_ref().ok_or_else(|| Failure::null("corpus"))?;
        write_out(out, corpus.0.split(split.into()).len())
    })
}

unsafe fn utterance<'a>(corpus: *const LasrCorpus, split: LasrSplit, index: usize) -> Result<&'a lasr::langsim::Utterance, Failure> {
    let corpus = corpus.as_ref().ok_or_else(|| Failure::null("corpus"))?;
    let utts = corpus.0.split(split.into());
    utts.get(index)
        .ok_or_else(|| Failure::invalid(format!("index {index} outside split of {} utterances", utts.len())))
}

/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_utterance_info(
    corpus: *const LasrCorpus,
    split: LasrSplit,
    index: usize,
    out: *mut LasrUtteranceInfo,
) -> LasrStatus {
    guard(|| {
        let u = utterance(corpus, split, index)?;
        write_out(
            out,
            LasrUtteranceInfo {
                utterance_id: u.utterance_id,
                num_frames: u.num_frames(),
                feature_dim: u.feature_dim(),
                label: u.label.map_or(-1, i64::from),
            },
        )
    })
}

/// Copies the `num_frames × feature_dim` frames (row-major) into `buf`.
///
/// # Safety
/// `corpus` must be a live handle; `buf` must hold `buf_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn lasr_corpus_utterance_frames(
    corpus: *const LasrCorpus,
    split: LasrSplit,
    index: usize,
    buf: *mut f64,
    buf_len: usize,
) -> LasrStatus {
    guard(|| {
        let u = utterance(corpus, split, index)?;
        out_slice(buf, buf_len, u.frames.numel())?.copy_from_slice(u.frames.data());
        Ok(())
    })
}

/// Fresh encoder for the experiment config at `config_path`.
///
/// # Safety
/// `config_path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_init(config_path: *const c_char, seed: u64, out: *mut *mut LasrModel) -> LasrStatus {
    guard(|| {
        let cfg = load_config(path_arg(config_path, "config_path")?)?;
        let params = EncoderParams::init(&cfg.encoder, seed).map_err(|e| Failure::invalid(e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(LasrModel(params))))
    })
}

/// Loads the parameters of a checkpoint file (optimizer blocks are ignored).
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_load(path: *const c_char, out: *mut *mut LasrModel) -> LasrStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let ckpt = Checkpoint::load(&path).map_err(|e| Failure(LasrStatus::Format, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(LasrModel(ckpt.params))))
    })
}

/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_save(model: *const LasrModel, path: *const c_char) -> LasrStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        let path = path_arg(path, "path")?;
        Checkpoint {
            params: model.0.clone(),
            step: 0,
            extra: Vec::new(),
        }
        .save(&path)
        .map_err(|e| Failure(LasrStatus::Io, e.to_string()))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_free(model: *mut LasrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_dims(model: *const LasrModel, out: *mut LasrModelDims) -> LasrStatus {
    guard(|| {
        let c = &model.as_ref().ok_or_else(|| Failure::null("model"))?.0.config;
        write_out(
            out,
            LasrModelDims {
                feature_dim: c.feature_dim,
                context: c.context,
                hidden_dim: c.hidden_dim,
                embed_dim: c.embed_dim,
                vocab_size: c.vocab_size,
                num_classes: c.num_classes,
            },
        )
    })
}

unsafe fn frames_arg<'a>(
    model: *const LasrModel,
    frames: *const f64,
    num_frames: usize,
    feature_dim: usize,
) -> Result<(&'a EncoderParams, Tensor), Failure> {
    let model = &model.as_ref().ok_or_else(|| Failure::null("model"))?.0;
    if num_frames == 0 {
        return Err(Failure::invalid("utterance has no frames"));
    }
    if feature_dim != model.config.feature_dim {
        return Err(Failure::invalid(format!(
            "model expects {} features per frame, got {feature_dim}",
            model.config.feature_dim
        )));
    }
    let data = slice_arg(frames, num_frames * feature_dim, "frames")?;
    let t = Tensor::matrix(num_frames, feature_dim, data.to_vec()).map_err(|e| Failure::invalid(e.to_string()))?;
    Ok((model, t))
}

/// Pooled utterance embedding (`embed_dim` values) of row-major frames.
///
/// # Safety
/// `frames` must hold `num_frames · feature_dim` doubles and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_embed(
    model: *const LasrModel,
    frames: *const f64,
    num_frames: usize,
    feature_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> LasrStatus {
    guard(|| {
        let (params, t) = frames_arg(model, frames, num_frames, feature_dim)?;
        let h = embed_utterances(params, &[&t]).map_err(|e| Failure(LasrStatus::Compute, e.to_string()))?;
        out_slice(out, out_len, h.numel())?.copy_from_slice(h.data());
        Ok(())
    })
}

/// Classifier posteriors (`num_classes` values summing to one).
///
/// # Safety
/// `frames` must hold `num_frames · feature_dim` doubles and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn lasr_model_posteriors(
    model: *const LasrModel,
    frames: *const f64,
    num_frames: usize,
    feature_dim: usize,
    out: *mut f64,
    out_len: usize,
) -> LasrStatus {
    guard(|| {
        let (params, t) = frames_arg(model, frames, num_frames, feature_dim)?;
        let p = posteriors(params, &[&t]).map_err(|e| Failure(LasrStatus::Compute, e.to_string()))?;
        out_slice(out, out_len, p.numel())?.copy_from_slice(p.data());
        Ok(())
    })
}

/// `arccos(cos(a, b)) / π` of two `len`-vectors.
///
/// # Safety
/// `a` and `b` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_angular_distance(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> LasrStatus {
    guard(|| {
        let a = slice_arg(a, len, "a")?;
        let b = slice_arg(b, len, "b")?;
        let d = angular_distance(a, b).map_err(|e| Failure::invalid(e.to_string()))?;
        write_out(out, d)
    })
}

/// Equal error rate of target and non-target scores (accept when `score >= θ`).
///
/// # Safety
/// The score pointers must hold the given counts; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lasr_eer(
    targets: *const f64,
    num_targets: usize,
    nontargets: *const f64,
    num_nontargets: usize,
    out: *mut f64,
) -> LasrStatus {
    guard(|| {
        let t = slice_arg(targets, num_targets, "targets")?;
        let n = slice_arg(nontargets, num_nontargets, "nontargets")?;
        let e = eer_from_scores(t, n).map_err(|e| Failure::invalid(e.to_string()))?;
        write_out(out, e)
    })
}

/// Learning rate at `step`: linear warmup to `peak_lr`, then inverse square
/// root decay. Steps are numbered from 1; NaN when `step` or `warmup_steps` is 0.
#[no_mangle]
pub extern "C" fn lasr_lr_schedule(step: u64, warmup_steps: u64, peak_lr: f64) -> f64 {
    if step == 0 || warmup_steps == 0 {
        return f64::NAN;
    }
    lr_schedule(step, warmup_steps, peak_lr)
}
