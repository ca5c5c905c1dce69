//! C ABI for the disentangled-embedding library.
//!
//! Every object crosses the boundary as an opaque handle (`DmiCorpus`,
//! `DmiTrainPlan`, `DmiModel`) created and destroyed by paired functions.
//! Fallible calls return 0 on success or a negative status code; the
//! offending detail is retrievable as a thread-local message via
//! [`dmi_last_error_message`]. Domain failures reuse the CLI exit codes
//! (negated) so both surfaces classify errors identically; codes -1..-4
//! are boundary-layer failures that have no CLI counterpart. Panics never
//! unwind across the boundary: they are caught and reported as
//! [`DMI_ERR_PANIC`].
//!
//! The generated header lands in `include/dmi.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use dmi_core::cli::exit_code_for;
use dmi_core::corpus::{load_corpus, pool_frames, Corpus, FrameFeatureSeq};
use dmi_core::eval::{evaluate_retrieval, EmbeddingVariant};
use dmi_core::heads::{encode, load_checkpoint, save_checkpoint, HeadParams, ModelConfig};
use dmi_core::mat::Mat;
use dmi_core::synth::{generate_corpus, SynthSpec};
use dmi_core::trainer::{apply_config_kv, train, TrainConfig};
use dmi_core::DmiError;

/// Success.
pub const DMI_OK: i32 = 0;
/// A required pointer argument was null.
pub const DMI_ERR_NULL_ARGUMENT: i32 = -1;
/// A string argument was not valid UTF-8.
pub const DMI_ERR_INVALID_UTF8: i32 = -2;
/// An internal panic was caught at the boundary.
pub const DMI_ERR_PANIC: i32 = -3;
/// An output buffer is shorter than the value to be written.
pub const DMI_ERR_BUFFER_TOO_SMALL: i32 = -4;

/// A loaded video corpus: frame features plus pair labels.
pub struct DmiCorpus {
    inner: Corpus,
}

/// A training recipe: architecture plus optimization hyperparameters.
pub struct DmiTrainPlan {
    inner: TrainConfig,
}

/// A trained (or freshly loaded) set of encoder parameters.
pub struct DmiModel {
    inner: HeadParams,
}

thread_local! {
    // Owns the bytes behind dmi_last_error_message; rewritten by the next
    // failing call on the same thread.
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

/// Negated CLI exit code for the error class.
fn code_of(e: &DmiError) -> i32 {
    set_error(&e.to_string());
    -exit_code_for(e)
}

/// Runs the body with panics converted to DMI_ERR_PANIC and the last-error
/// slot cleared on entry, so a 0 return always means a clean call.
fn guarded<F: FnOnce() -> i32>(f: F) -> i32 {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("internal panic: {msg}"));
            DMI_ERR_PANIC
        }
    }
}

/// Null-checked, UTF-8-checked &str view of a C string argument.
///
/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn arg_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, i32> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(DMI_ERR_NULL_ARGUMENT);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        DMI_ERR_INVALID_UTF8
    })
}

fn arg_ref<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, i32> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(DMI_ERR_NULL_ARGUMENT);
    }
    // Validity beyond non-null is the caller's contract.
    Ok(unsafe { &*ptr })
}

fn arg_out<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, i32> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(DMI_ERR_NULL_ARGUMENT);
    }
    Ok(unsafe { &mut *ptr })
}

fn parse_variant(s: &str) -> Result<EmbeddingVariant, i32> {
    s.parse::<EmbeddingVariant>().map_err(|e| code_of(&e))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dmi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Detail message of the current thread's most recent failure, or an empty
/// string after a success. The pointer stays valid until the next failing
/// call on the same thread.
#[no_mangle]
pub extern "C" fn dmi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a corpus from a manifest file, or from a directory containing
/// `manifest.jsonl`. On success writes a handle to `out`; free it with
/// [`dmi_corpus_free`].
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_corpus_open(path: *const c_char, out: *mut *mut DmiCorpus) -> i32 {
    guarded(|| {
        let out = match arg_out(out, "out") {
            Ok(o) => o,
            Err(c) => return c,
        };
        let path = match arg_str(path, "path") {
            Ok(p) => p,
            Err(c) => return c,
        };
        let path = Path::new(path);
        let manifest: PathBuf =
            if path.is_dir() { path.join("manifest.jsonl") } else { path.to_path_buf() };
        match load_corpus(&manifest) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DmiCorpus { inner }));
                DMI_OK
            }
            Err(e) => code_of(&e),
        }
    })
}

/// Generates a synthetic retrieval corpus: `n_base` base videos plus
/// `n_pairs` augmented positives over `feature_dim`-dim frame features,
/// deterministic in `seed`. Frees with [`dmi_corpus_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_corpus_synth(
    n_base: usize,
    n_pairs: usize,
    feature_dim: usize,
    seed: u64,
    out: *mut *mut DmiCorpus,
) -> i32 {
    guarded(|| {
        let out = match arg_out(out, "out") {
            Ok(o) => o,
            Err(c) => return c,
        };
        let spec = SynthSpec {
            n_base,
            n_pairs,
            frames_per_video: (4, 8),
            d: feature_dim,
            transform_mix: SynthSpec::default_mix(),
            seed,
        };
        match generate_corpus(&spec) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DmiCorpus { inner }));
                DMI_OK
            }
            Err(e) => code_of(&e),
        }
    })
}

/// Releases a corpus handle. A null handle is a no-op.
///
/// # Safety
/// `corpus` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dmi_corpus_free(corpus: *mut DmiCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of videos in the corpus.
///
/// # Safety
/// `corpus` must be a live corpus handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_corpus_video_count(
    corpus: *const DmiCorpus,
    out: *mut usize,
) -> i32 {
    guarded(|| {
        let (corpus, out) = match (arg_ref(corpus, "corpus"), arg_out(out, "out")) {
            (Ok(c), Ok(o)) => (c, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        *out = corpus.inner.videos.len();
        DMI_OK
    })
}

/// Frame-feature dimensionality of the corpus.
///
/// # Safety
/// `corpus` must be a live corpus handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_corpus_feature_dim(
    corpus: *const DmiCorpus,
    out: *mut usize,
) -> i32 {
    guarded(|| {
        let (corpus, out) = match (arg_ref(corpus, "corpus"), arg_out(out, "out")) {
            (Ok(c), Ok(o)) => (c, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        *out = corpus.inner.d;
        DMI_OK
    })
}

/// Creates a training plan with default hyperparameters around a model for
/// `feature_dim`-dim inputs. Adjust fields with [`dmi_train_plan_set`];
/// free with [`dmi_train_plan_free`].
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_train_plan_new(
    feature_dim: usize,
    out: *mut *mut DmiTrainPlan,
) -> i32 {
    guarded(|| {
        let out = match arg_out(out, "out") {
            Ok(o) => o,
            Err(c) => return c,
        };
        let cfg = TrainConfig::new(ModelConfig::new(feature_dim));
        if let Err(e) = cfg.validate() {
            return code_of(&e);
        }
        *out = Box::into_raw(Box::new(DmiTrainPlan { inner: cfg }));
        DMI_OK
    })
}

/// Sets one plan field by its flat config key, e.g. `("epochs", "50")` or
/// `("learning_rate", "1e-3")`. Keys match the config-file format; unknown
/// keys and unparsable values are errors. The combined plan is validated
/// at training time.
///
/// # Safety
/// `plan` must be a live plan handle; `key` and `value` valid strings.
#[no_mangle]
pub unsafe extern "C" fn dmi_train_plan_set(
    plan: *mut DmiTrainPlan,
    key: *const c_char,
    value: *const c_char,
) -> i32 {
    guarded(|| {
        if plan.is_null() {
            set_error("plan must not be null");
            return DMI_ERR_NULL_ARGUMENT;
        }
        let plan = &mut *plan;
        let (key, value) = match (arg_str(key, "key"), arg_str(value, "value")) {
            (Ok(k), Ok(v)) => (k, v),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        match apply_config_kv(&mut plan.inner, key, value) {
            Ok(()) => DMI_OK,
            Err(e) => code_of(&e),
        }
    })
}

/// Releases a plan handle. A null handle is a no-op.
///
/// # Safety
/// `plan` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dmi_train_plan_free(plan: *mut DmiTrainPlan) {
    if !plan.is_null() {
        drop(Box::from_raw(plan));
    }
}

/// Trains a model on the corpus under the plan. `log_csv_path` may be null;
/// when set, the per-step loss breakdown is written there as CSV. On
/// success writes a model handle to `out`; free it with [`dmi_model_free`].
/// Deterministic in the plan's seed.
///
/// # Safety
/// `corpus` and `plan` must be live handles, `log_csv_path` null or a valid
/// string, and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_train(
    corpus: *const DmiCorpus,
    plan: *const DmiTrainPlan,
    log_csv_path: *const c_char,
    out: *mut *mut DmiModel,
) -> i32 {
    guarded(|| {
        let out = match arg_out(out, "out") {
            Ok(o) => o,
            Err(c) => return c,
        };
        let (corpus, plan) = match (arg_ref(corpus, "corpus"), arg_ref(plan, "plan")) {
            (Ok(c), Ok(p)) => (c, p),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        let log_path = if log_csv_path.is_null() {
            None
        } else {
            match arg_str(log_csv_path, "log_csv_path") {
                Ok(p) => Some(PathBuf::from(p)),
                Err(c) => return c,
            }
        };
        let (params, log) = match train(&corpus.inner, &plan.inner) {
            Ok(r) => r,
            Err(e) => return code_of(&e),
        };
        if let Some(path) = log_path {
            if let Err(e) = log.write_csv(&path) {
                return code_of(&e);
            }
        }
        *out = Box::into_raw(Box::new(DmiModel { inner: params }));
        DMI_OK
    })
}

/// Loads a model from a checkpoint file. Frees with [`dmi_model_free`].
///
/// # Safety
/// `path` must be a valid string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_model_load(path: *const c_char, out: *mut *mut DmiModel) -> i32 {
    guarded(|| {
        let out = match arg_out(out, "out") {
            Ok(o) => o,
            Err(c) => return c,
        };
        let path = match arg_str(path, "path") {
            Ok(p) => p,
            Err(c) => return c,
        };
        match load_checkpoint(Path::new(path)) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(DmiModel { inner }));
                DMI_OK
            }
            Err(e) => code_of(&e),
        }
    })
}

/// Saves a model to a checkpoint file (bit-exact round trip).
///
/// # Safety
/// `model` must be a live model handle and `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn dmi_model_save(model: *const DmiModel, path: *const c_char) -> i32 {
    guarded(|| {
        let (model, path) = match (arg_ref(model, "model"), arg_str(path, "path")) {
            (Ok(m), Ok(p)) => (m, p),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        match save_checkpoint(&model.inner, Path::new(path)) {
            Ok(()) => DMI_OK,
            Err(e) => code_of(&e),
        }
    })
}

/// Releases a model handle. A null handle is a no-op.
///
/// # Safety
/// `model` must be null or a handle returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dmi_model_free(model: *mut DmiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Frame-feature dimensionality the model expects.
///
/// # Safety
/// `model` must be a live model handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_model_feature_dim(model: *const DmiModel, out: *mut usize) -> i32 {
    guarded(|| {
        let (model, out) = match (arg_ref(model, "model"), arg_out(out, "out")) {
            (Ok(m), Ok(o)) => (m, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        *out = model.inner.cfg.d;
        DMI_OK
    })
}

/// Length of the embedding produced for a variant: `"global"`, `"v"`,
/// `"z_s"` (alias `"aux"`), or `"z_0"`..`"z_{k-1}"`.
///
/// # Safety
/// `model` must be a live model handle, `variant` a valid string, and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dmi_embedding_dim(
    model: *const DmiModel,
    variant: *const c_char,
    out: *mut usize,
) -> i32 {
    guarded(|| {
        let (model, out) = match (arg_ref(model, "model"), arg_out(out, "out")) {
            (Ok(m), Ok(o)) => (m, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        let variant = match arg_str(variant, "variant").and_then(|s| parse_variant(s)) {
            Ok(v) => v,
            Err(c) => return c,
        };
        let cfg = &model.inner.cfg;
        *out = match variant {
            EmbeddingVariant::Global => cfg.global_dim(),
            EmbeddingVariant::V => cfg.v_dim(),
            EmbeddingVariant::Aux => cfg.d_s,
            EmbeddingVariant::Sub(i) => {
                if i >= cfg.k {
                    let e = DmiError::UnknownVariant(format!("z_{i} (model has k={})", cfg.k));
                    return code_of(&e);
                }
                cfg.d_z
            }
        };
        DMI_OK
    })
}

/// Embeds one video: mean-pools `n_frames` x `frame_dim` row-major frame
/// features, encodes, and writes the requested variant's embedding to
/// `out` (first `dmi_embedding_dim` values). `out_len` must be at least
/// that length.
///
/// # Safety
/// `model` must be a live model handle; `frames` must point to
/// `n_frames * frame_dim` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dmi_embed(
    model: *const DmiModel,
    frames: *const f64,
    n_frames: usize,
    frame_dim: usize,
    variant: *const c_char,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    guarded(|| {
        let model = match arg_ref(model, "model") {
            Ok(m) => m,
            Err(c) => return c,
        };
        if frames.is_null() || out.is_null() {
            set_error("frames and out must not be null");
            return DMI_ERR_NULL_ARGUMENT;
        }
        let variant = match arg_str(variant, "variant").and_then(|s| parse_variant(s)) {
            Ok(v) => v,
            Err(c) => return c,
        };
        if let EmbeddingVariant::Sub(i) = variant {
            if i >= model.inner.cfg.k {
                let e = DmiError::UnknownVariant(format!("z_{i} (model has k={})", model.inner.cfg.k));
                return code_of(&e);
            }
        }
        let total = match n_frames.checked_mul(frame_dim) {
            Some(t) if n_frames > 0 && frame_dim > 0 => t,
            _ => {
                let e = DmiError::EmptyInput("frames must be a nonempty matrix".into());
                return code_of(&e);
            }
        };
        if frame_dim != model.inner.cfg.d {
            let e = DmiError::DimensionMismatch(format!(
                "frames have dim {frame_dim}, model expects {}",
                model.inner.cfg.d
            ));
            return code_of(&e);
        }
        let data = std::slice::from_raw_parts(frames, total).to_vec();
        let seq = FrameFeatureSeq {
            video_id: String::new(),
            frames: Mat { rows: n_frames, cols: frame_dim, data },
        };
        let pooled = pool_frames(&seq);
        let set = match encode(&model.inner, &pooled.values) {
            Ok(s) => s,
            Err(e) => return code_of(&e),
        };
        let emb: &[f64] = match &variant {
            EmbeddingVariant::Global => &set.global,
            EmbeddingVariant::V => &set.v,
            EmbeddingVariant::Aux => &set.aux,
            EmbeddingVariant::Sub(i) => &set.sub[*i],
        };
        if out_len < emb.len() {
            set_error(&format!("out has room for {out_len} values, embedding needs {}", emb.len()));
            return DMI_ERR_BUFFER_TOO_SMALL;
        }
        std::slice::from_raw_parts_mut(out, emb.len()).copy_from_slice(emb);
        DMI_OK
    })
}

/// Scores labeled-pair retrieval over the whole corpus with the variant's
/// embedding: mean average precision over queries at top-100 and over the
/// full ranking. `n_queries` may be null.
///
/// # Safety
/// `model` and `corpus` must be live handles; `variant` a valid string;
/// `top100_map` and `topinf_map` valid pointers; `n_queries` null or valid.
#[no_mangle]
pub unsafe extern "C" fn dmi_evaluate(
    model: *const DmiModel,
    corpus: *const DmiCorpus,
    variant: *const c_char,
    top100_map: *mut f64,
    topinf_map: *mut f64,
    n_queries: *mut usize,
) -> i32 {
    guarded(|| {
        let (model, corpus) = match (arg_ref(model, "model"), arg_ref(corpus, "corpus")) {
            (Ok(m), Ok(c)) => (m, c),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        let (out100, outinf) = match (arg_out(top100_map, "top100_map"), arg_out(topinf_map, "topinf_map")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        let variant = match arg_str(variant, "variant").and_then(|s| parse_variant(s)) {
            Ok(v) => v,
            Err(c) => return c,
        };
        let sub_count = model.inner.cfg.k;
        if let EmbeddingVariant::Sub(i) = variant {
            if i >= sub_count {
                let e = DmiError::UnknownVariant(format!("z_{i} (model has k={sub_count})"));
                return code_of(&e);
            }
        }
        match evaluate_retrieval(&model.inner, &corpus.inner, variant, None) {
            Ok(report) => {
                *out100 = report.top100_map;
                *outinf = report.topinf_map;
                if !n_queries.is_null() {
                    *n_queries = report.per_query_ap.len();
                }
                DMI_OK
            }
            Err(e) => code_of(&e),
        }
    })
}
