//! C ABI over the `predictive_asr` crate.
//!
//! Every entry point returns a [`PasrStatus`]; results come back through
//! out-pointers. Objects are opaque handles released with their `_free`
//! function. On failure [`pasr_last_error`] describes the most recent error
//! on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use predictive_asr::confidence::{ConfidenceModel, FeatureVector};
use predictive_asr::corpus::{self, Corpus, CorpusFormat, LoadOptions, Partition, SyntheticSpec};
use predictive_asr::eval::{self, LatencyConfig};
use predictive_asr::policy::{OutcomeKind, PrefetchOutcome};
use predictive_asr::predictor::{CompletionParams, NgramModel};
use predictive_asr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    InvalidData = 6,
    SchemaMismatch = 7,
    Training = 8,
    OutOfRange = 9,
    Internal = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasrCorpusFormat {
    Native = 0,
    Slurp = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasrPartition {
    Train = 0,
    Dev = 1,
    Test = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PasrOutcome {
    NoPrefetch = 0,
    Success = 1,
    Failure = 2,
}

pub struct PasrCorpus {
    inner: Corpus,
}

pub struct PasrNgramModel {
    inner: NgramModel,
}

pub struct PasrConfidenceModel {
    inner: ConfidenceModel,
}

struct Completion {
    text: CString,
    logprob: f64,
    extra_words: usize,
}

/// Ranked completions of one partial hypothesis.
pub struct PasrCompletions {
    items: Vec<Completion>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(PasrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => PasrStatus::Io,
            Error::Parse { .. } => PasrStatus::Parse,
            Error::InvalidData { .. } => PasrStatus::InvalidData,
            Error::InvalidArgument(_) => PasrStatus::InvalidArgument,
            Error::SchemaMismatch(_) => PasrStatus::SchemaMismatch,
            Error::Training(_) => PasrStatus::Training,
            Error::Invariant(_) => PasrStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard<F>(f: F) -> PasrStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PasrStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(&message);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            PasrStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PasrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PasrStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn partition(p: PasrPartition) -> Partition {
    match p {
        PasrPartition::Train => Partition::Train,
        PasrPartition::Dev => Partition::Dev,
        PasrPartition::Test => Partition::Test,
    }
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pasr_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(c) => c.as_ptr(),
        None => ptr::null(),
    })
}

/// Loads a corpus with default timing and split options.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_corpus_load(
    path: *const c_char,
    format: PasrCorpusFormat,
    out: *mut *mut PasrCorpus,
) -> PasrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let format = match format {
            PasrCorpusFormat::Native => CorpusFormat::Native,
            PasrCorpusFormat::Slurp => CorpusFormat::Slurp,
        };
        let inner = corpus::load_corpus(&path, format, &LoadOptions::default())?;
        *out = Box::into_raw(Box::new(PasrCorpus { inner }));
        Ok(())
    })
}

/// Generates a synthetic corpus with the default grammar.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_corpus_generate(
    users: usize,
    days: f64,
    utterances_per_day: f64,
    habitual_pool: usize,
    habitual_mix: f64,
    seed: u64,
    out: *mut *mut PasrCorpus,
) -> PasrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let spec = SyntheticSpec {
            users,
            days,
            utterances_per_day,
            habitual_pool,
            habitual_mix,
            ..SyntheticSpec::default()
        };
        let inner = corpus::generate_synthetic(&spec, seed)?;
        *out = Box::into_raw(Box::new(PasrCorpus { inner }));
        Ok(())
    })
}

/// Number of utterances in `partition`.
///
/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_corpus_len(
    corpus: *const PasrCorpus,
    partition_: PasrPartition,
    out: *mut usize,
) -> PasrStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        *out_arg(out, "out")? = c.inner.partition(partition(partition_)).len();
        Ok(())
    })
}

/// # Safety
/// `corpus` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pasr_corpus_write_native(
    corpus: *const PasrCorpus,
    path: *const c_char,
) -> PasrStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        c.inner.write_native(&path)?;
        Ok(())
    })
}

/// # Safety
/// `corpus` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasr_corpus_free(corpus: *mut PasrCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains an n-gram LM on one partition of `corpus`.
///
/// # Safety
/// `corpus` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_ngram_train(
    corpus: *const PasrCorpus,
    partition_: PasrPartition,
    order: usize,
    discount: f64,
    out: *mut *mut PasrNgramModel,
) -> PasrStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        let out = out_arg(out, "out")?;
        let inner = predictive_asr::predictor::train_ngram(
            &c.inner,
            partition(partition_),
            order,
            discount,
        )?;
        *out = Box::into_raw(Box::new(PasrNgramModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_ngram_load(
    path: *const c_char,
    out: *mut *mut PasrNgramModel,
) -> PasrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = NgramModel::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PasrNgramModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pasr_ngram_save(
    model: *const PasrNgramModel,
    path: *const c_char,
) -> PasrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.inner.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasr_ngram_free(model: *mut PasrNgramModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Natural-log probability of `text` (normalized, end of sentence included)
/// after its first `given_prefix_len` words.
///
/// # Safety
/// `model` must be a live handle; `text` a NUL-terminated string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_ngram_sequence_logprob(
    model: *const PasrNgramModel,
    text: *const c_char,
    given_prefix_len: usize,
    out: *mut f64,
) -> PasrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let tokens = corpus::normalize(str_arg(text, "text")?);
        if given_prefix_len > tokens.len() {
            return Err(Failure(
                PasrStatus::OutOfRange,
                format!(
                    "prefix length {given_prefix_len} exceeds {} words",
                    tokens.len()
                ),
            ));
        }
        *out_arg(out, "out")? = m.inner.sequence_logprob(&tokens, given_prefix_len);
        Ok(())
    })
}

/// Beam-search completions of the partial hypothesis `partial`.
///
/// # Safety
/// `model` must be a live handle; `partial` a NUL-terminated string; `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_ngram_complete(
    model: *const PasrNgramModel,
    partial: *const c_char,
    beam_width: usize,
    n_best: usize,
    max_extra_tokens: usize,
    out: *mut *mut PasrCompletions,
) -> PasrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let out = out_arg(out, "out")?;
        let tokens = corpus::normalize(str_arg(partial, "partial")?);
        let params = CompletionParams {
            beam_width,
            n_best,
            max_extra_tokens,
        };
        let items = m
            .inner
            .complete(&tokens, &params)?
            .into_iter()
            .map(|p| Completion {
                text: CString::new(p.tokens.join(" ")).unwrap_or_default(),
                logprob: p.lm_logprob,
                extra_words: p.extra_words(),
            })
            .collect();
        *out = Box::into_raw(Box::new(PasrCompletions { items }));
        Ok(())
    })
}

/// # Safety
/// `list` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pasr_completions_len(list: *const PasrCompletions) -> usize {
    list.as_ref().map_or(0, |l| l.items.len())
}

unsafe fn item<'a>(list: *const PasrCompletions, index: usize) -> Result<&'a Completion, Failure> {
    let l = ref_arg(list, "list")?;
    l.items.get(index).ok_or_else(|| {
        Failure(
            PasrStatus::OutOfRange,
            format!("index {index} out of {} completions", l.items.len()),
        )
    })
}

/// Text of completion `index`; the string is owned by `list`.
///
/// # Safety
/// `list` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_completions_text(
    list: *const PasrCompletions,
    index: usize,
    out: *mut *const c_char,
) -> PasrStatus {
    guard(|| {
        let it = item(list, index)?;
        *out_arg(out, "out")? = it.text.as_ptr();
        Ok(())
    })
}

/// Log-probability of completion `index` given its partial.
///
/// # Safety
/// `list` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_completions_logprob(
    list: *const PasrCompletions,
    index: usize,
    out: *mut f64,
) -> PasrStatus {
    guard(|| {
        let it = item(list, index)?;
        *out_arg(out, "out")? = it.logprob;
        Ok(())
    })
}

/// Words completion `index` adds to its partial.
///
/// # Safety
/// `list` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_completions_extra_words(
    list: *const PasrCompletions,
    index: usize,
    out: *mut usize,
) -> PasrStatus {
    guard(|| {
        let it = item(list, index)?;
        *out_arg(out, "out")? = it.extra_words;
        Ok(())
    })
}

/// # Safety
/// `list` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasr_completions_free(list: *mut PasrCompletions) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// Loads a confidence model written by the `train` command.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_confidence_load(
    path: *const c_char,
    out: *mut *mut PasrConfidenceModel,
) -> PasrStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = ConfidenceModel::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(PasrConfidenceModel { inner }));
        Ok(())
    })
}

/// Number of features the model expects, or 0 when it accepts either schema.
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_confidence_dim(
    model: *const PasrConfidenceModel,
    out: *mut usize,
) -> PasrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        *out_arg(out, "out")? = m.inner.schema().map_or(0, |s| s.dim());
        Ok(())
    })
}

/// Scores one feature vector in the order lm_logprob_cond, nbest_rank,
/// partial_words, partial_chars, pred_words, pred_chars, time_since_start
/// and optionally personal_logfreq.
///
/// # Safety
/// `model` must be a live handle; `features` must point to `n_features`
/// doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_confidence_score(
    model: *const PasrConfidenceModel,
    features: *const f64,
    n_features: usize,
    out: *mut f64,
) -> PasrStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        if features.is_null() {
            return Err(null("features"));
        }
        let values = std::slice::from_raw_parts(features, n_features);
        let fv = FeatureVector::from_slice(values)?;
        *out_arg(out, "out")? = m.inner.score(&fv)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pasr_confidence_free(model: *mut PasrConfidenceModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// User-perceived latency in seconds for one prefetch outcome.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pasr_upl(
    outcome: PasrOutcome,
    prediction_gain: f64,
    t_ep: f64,
    t_response: f64,
    out: *mut f64,
) -> PasrStatus {
    guard(|| {
        let cfg = LatencyConfig { t_ep, t_response };
        cfg.validate()?;
        let kind = match outcome {
            PasrOutcome::NoPrefetch => OutcomeKind::NoPrefetch,
            PasrOutcome::Success => OutcomeKind::Success,
            PasrOutcome::Failure => OutcomeKind::Failure,
        };
        let mut o = PrefetchOutcome::none(0);
        o.kind = kind;
        if kind != OutcomeKind::NoPrefetch {
            if !prediction_gain.is_finite() {
                return Err(Failure(
                    PasrStatus::InvalidArgument,
                    format!("prediction gain must be finite, got {prediction_gain}"),
                ));
            }
            o.prediction_gain = Some(prediction_gain);
        }
        *out_arg(out, "out")? = eval::upl(&o, &cfg);
        Ok(())
    })
}
