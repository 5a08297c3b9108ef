#ifndef PREDICTIVE_ASR_H
#define PREDICTIVE_ASR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  PASR_CORPUS_FORMAT_NATIVE = 0,
  PASR_CORPUS_FORMAT_SLURP = 1,
} PasrCorpusFormat;

typedef enum {
  PASR_OUTCOME_NO_PREFETCH = 0,
  PASR_OUTCOME_SUCCESS = 1,
  PASR_OUTCOME_FAILURE = 2,
} PasrOutcome;

typedef enum {
  PASR_PARTITION_TRAIN = 0,
  PASR_PARTITION_DEV = 1,
  PASR_PARTITION_TEST = 2,
} PasrPartition;

typedef enum {
  PASR_STATUS_OK = 0,
  PASR_STATUS_NULL_POINTER = 1,
  PASR_STATUS_INVALID_UTF8 = 2,
  PASR_STATUS_INVALID_ARGUMENT = 3,
  PASR_STATUS_IO = 4,
  PASR_STATUS_PARSE = 5,
  PASR_STATUS_INVALID_DATA = 6,
  PASR_STATUS_SCHEMA_MISMATCH = 7,
  PASR_STATUS_TRAINING = 8,
  PASR_STATUS_OUT_OF_RANGE = 9,
  PASR_STATUS_INTERNAL = 10,
} PasrStatus;

/**
 * Ranked completions of one partial hypothesis.
 */
typedef struct PasrCompletions PasrCompletions;

typedef struct PasrConfidenceModel PasrConfidenceModel;

typedef struct PasrCorpus PasrCorpus;

typedef struct PasrNgramModel PasrNgramModel;

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *pasr_last_error(void);

/**
 * Loads a corpus with default timing and split options.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PasrStatus pasr_corpus_load(const char *path, PasrCorpusFormat format, PasrCorpus **out);

/**
 * Generates a synthetic corpus with the default grammar.
 *
 * # Safety
 * `out` must be writable.
 */
PasrStatus pasr_corpus_generate(size_t users,
                                double days,
                                double utterances_per_day,
                                size_t habitual_pool,
                                double habitual_mix,
                                uint64_t seed,
                                PasrCorpus **out);

/**
 * Number of utterances in `partition`.
 *
 * # Safety
 * `corpus` must be a live handle; `out` must be writable.
 */
PasrStatus pasr_corpus_len(const PasrCorpus *corpus, PasrPartition partition_, size_t *out);

/**
 * # Safety
 * `corpus` must be a live handle; `path` a NUL-terminated string.
 */
PasrStatus pasr_corpus_write_native(const PasrCorpus *corpus, const char *path);

/**
 * # Safety
 * `corpus` must be NULL or a handle not yet freed.
 */
void pasr_corpus_free(PasrCorpus *corpus);

/**
 * Trains an n-gram LM on one partition of `corpus`.
 *
 * # Safety
 * `corpus` must be a live handle; `out` must be writable.
 */
PasrStatus pasr_ngram_train(const PasrCorpus *corpus,
                            PasrPartition partition_,
                            size_t order,
                            double discount,
                            PasrNgramModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
PasrStatus pasr_ngram_load(const char *path, PasrNgramModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
PasrStatus pasr_ngram_save(const PasrNgramModel *model, const char *path);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void pasr_ngram_free(PasrNgramModel *model);

/**
 * Natural-log probability of `text` (normalized, end of sentence included)
 * after its first `given_prefix_len` words.
 *
 * # Safety
 * `model` must be a live handle; `text` a NUL-terminated string; `out`
 * writable.
 */
PasrStatus pasr_ngram_sequence_logprob(const PasrNgramModel *model,
                                       const char *text,
                                       size_t given_prefix_len,
                                       double *out);

/**
 * Beam-search completions of the partial hypothesis `partial`.
 *
 * # Safety
 * `model` must be a live handle; `partial` a NUL-terminated string; `out`
 * writable.
 */
PasrStatus pasr_ngram_complete(const PasrNgramModel *model,
                               const char *partial,
                               size_t beam_width,
                               size_t n_best,
                               size_t max_extra_tokens,
                               PasrCompletions **out);

/**
 * # Safety
 * `list` must be a live handle.
 */
size_t pasr_completions_len(const PasrCompletions *list);

/**
 * Text of completion `index`; the string is owned by `list`.
 *
 * # Safety
 * `list` must be a live handle; `out` writable.
 */
PasrStatus pasr_completions_text(const PasrCompletions *list, size_t index, const char **out);

/**
 * Log-probability of completion `index` given its partial.
 *
 * # Safety
 * `list` must be a live handle; `out` writable.
 */
PasrStatus pasr_completions_logprob(const PasrCompletions *list, size_t index, double *out);

/**
 * Words completion `index` adds to its partial.
 *
 * # Safety
 * `list` must be a live handle; `out` writable.
 */
PasrStatus pasr_completions_extra_words(const PasrCompletions *list, size_t index, size_t *out);

/**
 * # Safety
 * `list` must be NULL or a handle not yet freed.
 */
void pasr_completions_free(PasrCompletions *list);

/**
 * Loads a confidence model written by the `train` command.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
PasrStatus pasr_confidence_load(const char *path, PasrConfidenceModel **out);

/**
 * Number of features the model expects, or 0 when it accepts either schema.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
PasrStatus pasr_confidence_dim(const PasrConfidenceModel *model, size_t *out);

/**
 * Scores one feature vector in the order lm_logprob_cond, nbest_rank,
 * partial_words, partial_chars, pred_words, pred_chars, time_since_start
 * and optionally personal_logfreq.
 *
 * # Safety
 * `model` must be a live handle; `features` must point to `n_features`
 * doubles; `out` writable.
 */
PasrStatus pasr_confidence_score(const PasrConfidenceModel *model,
                                 const double *features,
                                 size_t n_features,
                                 double *out);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void pasr_confidence_free(PasrConfidenceModel *model);

/**
 * User-perceived latency in seconds for one prefetch outcome.
 *
 * # Safety
 * `out` must be writable.
 */
PasrStatus pasr_upl(PasrOutcome outcome,
                    double prediction_gain,
                    double t_ep,
                    double t_response,
                    double *out);

#endif  /* PREDICTIVE_ASR_H */
