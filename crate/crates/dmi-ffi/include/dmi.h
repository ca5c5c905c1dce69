/*
 * C interface for the disentangled-embedding library.
 *
 * Fallible calls return 0 on success. Codes -1..-4 are boundary failures
 * (see the DMI_ERR_* constants); other negative codes are domain failures,
 * the negated CLI exit code for the same error class. Every nonzero return
 * leaves a detail message in dmi_last_error_message().
 */

#ifndef DMI_H
#define DMI_H

/* Generated by cbindgen from the dmi-ffi crate; edit the Rust source instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Success.
#define DMI_OK 0

// A required pointer argument was null.
#define DMI_ERR_NULL_ARGUMENT -1

// A string argument was not valid UTF-8.
#define DMI_ERR_INVALID_UTF8 -2

// An internal panic was caught at the boundary.
#define DMI_ERR_PANIC -3

// An output buffer is shorter than the value to be written.
#define DMI_ERR_BUFFER_TOO_SMALL -4

// A loaded video corpus: frame features plus pair labels.
typedef struct DmiCorpus DmiCorpus;

// A trained (or freshly loaded) set of encoder parameters.
typedef struct DmiModel DmiModel;

// A training recipe: architecture plus optimization hyperparameters.
typedef struct DmiTrainPlan DmiTrainPlan;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *dmi_version(void);

// Detail message of the current thread's most recent failure, or an empty
// string after a success. The pointer stays valid until the next failing
// call on the same thread.
const char *dmi_last_error_message(void);

// Loads a corpus from a manifest file, or from a directory containing
// `manifest.jsonl`. On success writes a handle to `out`; free it with
// [`dmi_corpus_free`].
//
// # Safety
// `path` must be a valid NUL-terminated string and `out` a valid pointer.
int32_t dmi_corpus_open(const char *path, struct DmiCorpus **out);

// Generates a synthetic retrieval corpus: `n_base` base videos plus
// `n_pairs` augmented positives over `feature_dim`-dim frame features,
// deterministic in `seed`. Frees with [`dmi_corpus_free`].
//
// # Safety
// `out` must be a valid pointer.
int32_t dmi_corpus_synth(size_t n_base,
                         size_t n_pairs,
                         size_t feature_dim,
                         uint64_t seed,
                         struct DmiCorpus **out);

// Releases a corpus handle. A null handle is a no-op.
//
// # Safety
// `corpus` must be null or a handle returned by this library, not yet freed.
void dmi_corpus_free(struct DmiCorpus *corpus);

// Number of videos in the corpus.
//
// # Safety
// `corpus` must be a live corpus handle and `out` a valid pointer.
int32_t dmi_corpus_video_count(const struct DmiCorpus *corpus, size_t *out);

// Frame-feature dimensionality of the corpus.
//
// # Safety
// `corpus` must be a live corpus handle and `out` a valid pointer.
int32_t dmi_corpus_feature_dim(const struct DmiCorpus *corpus, size_t *out);

// Creates a training plan with default hyperparameters around a model for
// `feature_dim`-dim inputs. Adjust fields with [`dmi_train_plan_set`];
// free with [`dmi_train_plan_free`].
//
// # Safety
// `out` must be a valid pointer.
int32_t dmi_train_plan_new(size_t feature_dim, struct DmiTrainPlan **out);

// Sets one plan field by its flat config key, e.g. `("epochs", "50")` or
// `("learning_rate", "1e-3")`. Keys match the config-file format; unknown
// keys and unparsable values are errors. The combined plan is validated
// at training time.
//
// # Safety
// `plan` must be a live plan handle; `key` and `value` valid strings.
int32_t dmi_train_plan_set(struct DmiTrainPlan *plan, const char *key, const char *value);

// Releases a plan handle. A null handle is a no-op.
//
// # Safety
// `plan` must be null or a handle returned by this library, not yet freed.
void dmi_train_plan_free(struct DmiTrainPlan *plan);

// Trains a model on the corpus under the plan. `log_csv_path` may be null;
// when set, the per-step loss breakdown is written there as CSV. On
// success writes a model handle to `out`; free it with [`dmi_model_free`].
// Deterministic in the plan's seed.
//
// # Safety
// `corpus` and `plan` must be live handles, `log_csv_path` null or a valid
// string, and `out` a valid pointer.
int32_t dmi_train(const struct DmiCorpus *corpus,
                  const struct DmiTrainPlan *plan,
                  const char *log_csv_path,
                  struct DmiModel **out);

// Loads a model from a checkpoint file. Frees with [`dmi_model_free`].
//
// # Safety
// `path` must be a valid string and `out` a valid pointer.
int32_t dmi_model_load(const char *path, struct DmiModel **out);

// Saves a model to a checkpoint file (bit-exact round trip).
//
// # Safety
// `model` must be a live model handle and `path` a valid string.
int32_t dmi_model_save(const struct DmiModel *model, const char *path);

// Releases a model handle. A null handle is a no-op.
//
// # Safety
// `model` must be null or a handle returned by this library, not yet freed.
void dmi_model_free(struct DmiModel *model);

// Frame-feature dimensionality the model expects.
//
// # Safety
// `model` must be a live model handle and `out` a valid pointer.
int32_t dmi_model_feature_dim(const struct DmiModel *model, size_t *out);

// Length of the embedding produced for a variant: `"global"`, `"v"`,
// `"z_s"` (alias `"aux"`), or `"z_0"`..`"z_{k-1}"`.
//
// # Safety
// `model` must be a live model handle, `variant` a valid string, and
// `out` a valid pointer.
int32_t dmi_embedding_dim(const struct DmiModel *model, const char *variant, size_t *out);

// Embeds one video: mean-pools `n_frames` x `frame_dim` row-major frame
// features, encodes, and writes the requested variant's embedding to
// `out` (first `dmi_embedding_dim` values). `out_len` must be at least
// that length.
//
// # Safety
// `model` must be a live model handle; `frames` must point to
// `n_frames * frame_dim` doubles and `out` to `out_len` doubles.
int32_t dmi_embed(const struct DmiModel *model,
                  const double *frames,
                  size_t n_frames,
                  size_t frame_dim,
                  const char *variant,
                  double *out,
                  size_t out_len);

// Scores labeled-pair retrieval over the whole corpus with the variant's
// embedding: mean average precision over queries at top-100 and over the
// full ranking. `n_queries` may be null.
//
// # Safety
// `model` and `corpus` must be live handles; `variant` a valid string;
// `top100_map` and `topinf_map` valid pointers; `n_queries` null or valid.
int32_t dmi_evaluate(const struct DmiModel *model,
                     const struct DmiCorpus *corpus,
                     const char *variant,
                     double *top100_map,
                     double *topinf_map,
                     size_t *n_queries);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMI_H */
