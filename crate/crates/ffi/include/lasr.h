#ifndef LASR_H
#define LASR_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LasrSplit {
  LASR_SPLIT_PRETRAIN = 0,
  LASR_SPLIT_FINETUNE_TRAIN = 1,
  LASR_SPLIT_DEV = 2,
  LASR_SPLIT_TEST = 3,
} LasrSplit;

typedef enum LasrStatus {
  LASR_STATUS_OK = 0,
  LASR_STATUS_NULL_POINTER = 1,
  LASR_STATUS_INVALID_ARGUMENT = 2,
  LASR_STATUS_BUFFER_TOO_SMALL = 3,
  LASR_STATUS_IO = 4,
  LASR_STATUS_FORMAT = 5,
  LASR_STATUS_COMPUTE = 6,
  LASR_STATUS_PANIC = 7,
} LasrStatus;

/**
 * Opaque synthetic corpus.
 */
typedef struct LasrCorpus LasrCorpus;

/**
 * Opaque encoder with its classifier head.
 */
typedef struct LasrModel LasrModel;

/**
 * Metadata of one utterance; `label` is -1 for an unlabeled utterance.
 */
typedef struct LasrUtteranceInfo {
  uint64_t utterance_id;
  size_t num_frames;
  size_t feature_dim;
  int64_t label;
} LasrUtteranceInfo;

typedef struct LasrModelDims {
  size_t feature_dim;
  size_t context;
  size_t hidden_dim;
  size_t embed_dim;
  size_t vocab_size;
  size_t num_classes;
} LasrModelDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message; free it with
 * [`lasr_string_free`]. Returns null when no error has been recorded.
 */
char *lasr_last_error_message(void);

/**
 * # Safety
 * `s` must be null or a string returned by this library, freed at most once.
 */
void lasr_string_free(char *s);

/**
 * Builds the corpus described by the experiment config at `config_path`.
 *
 * # Safety
 * `config_path` must be a nul-terminated string; `out` must be writable.
 */
enum LasrStatus lasr_corpus_generate(const char *config_path, struct LasrCorpus **out);

/**
 * # Safety
 * `dir` must be a nul-terminated string; `out` must be writable.
 */
enum LasrStatus lasr_corpus_load(const char *dir, struct LasrCorpus **out);

/**
 * # Safety
 * `corpus` must be a live handle and `dir` a nul-terminated string.
 */
enum LasrStatus lasr_corpus_save(const struct LasrCorpus *corpus, const char *dir);

/**
 * # Safety
 * `corpus` must be null or a handle not yet freed.
 */
void lasr_corpus_free(struct LasrCorpus *corpus);

/**
 * # Safety
 * `corpus` must be a live handle; `out` must be writable.
 */
enum LasrStatus lasr_corpus_split_len(const struct LasrCorpus *corpus,
                                      enum LasrSplit split,
                                      size_t *out);

/**
 * # Safety
 * `corpus` must be a live handle; `out` must be writable.
 */
enum LasrStatus lasr_corpus_utterance_info(const struct LasrCorpus *corpus,
                                           enum LasrSplit split,
                                           size_t index,
                                           struct LasrUtteranceInfo *out);

/**
 * Copies the `num_frames × feature_dim` frames (row-major) into `buf`.
 *
 * # Safety
 * `corpus` must be a live handle; `buf` must hold `buf_len` doubles.
 */
enum LasrStatus lasr_corpus_utterance_frames(const struct LasrCorpus *corpus,
                                             enum LasrSplit split,
                                             size_t index,
                                             double *buf,
                                             size_t buf_len);

/**
 * Fresh encoder for the experiment config at `config_path`.
 *
 * # Safety
 * `config_path` must be a nul-terminated string; `out` must be writable.
 */
enum LasrStatus lasr_model_init(const char *config_path, uint64_t seed, struct LasrModel **out);

/**
 * Loads the parameters of a checkpoint file (optimizer blocks are ignored).
 *
 * # Safety
 * `path` must be a nul-terminated string; `out` must be writable.
 */
enum LasrStatus lasr_model_load(const char *path, struct LasrModel **out);

/**
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum LasrStatus lasr_model_save(const struct LasrModel *model, const char *path);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void lasr_model_free(struct LasrModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum LasrStatus lasr_model_dims(const struct LasrModel *model, struct LasrModelDims *out);

/**
 * Pooled utterance embedding (`embed_dim` values) of row-major frames.
 *
 * # Safety
 * `frames` must hold `num_frames · feature_dim` doubles and `out` `out_len`.
 */
enum LasrStatus lasr_model_embed(const struct LasrModel *model,
                                 const double *frames,
                                 size_t num_frames,
                                 size_t feature_dim,
                                 double *out,
                                 size_t out_len);

/**
 * Classifier posteriors (`num_classes` values summing to one).
 *
 * # Safety
 * `frames` must hold `num_frames · feature_dim` doubles and `out` `out_len`.
 */
enum LasrStatus lasr_model_posteriors(const struct LasrModel *model,
                                      const double *frames,
                                      size_t num_frames,
                                      size_t feature_dim,
                                      double *out,
                                      size_t out_len);

/**
 * `arccos(cos(a, b)) / π` of two `len`-vectors.
 *
 * # Safety
 * `a` and `b` must hold `len` doubles; `out` must be writable.
 */
enum LasrStatus lasr_angular_distance(const double *a, const double *b, size_t len, double *out);

/**
 * Equal error rate of target and non-target scores (accept when `score >= θ`).
 *
 * # Safety
 * The score pointers must hold the given counts; `out` must be writable.
 */
enum LasrStatus lasr_eer(const double *targets,
                         size_t num_targets,
                         const double *nontargets,
                         size_t num_nontargets,
                         double *out);

/**
 * Learning rate at `step`: linear warmup to `peak_lr`, then inverse square
 * root decay. Steps are numbered from 1; NaN when `step` or `warmup_steps` is 0.
 */
double lasr_lr_schedule(uint64_t step, uint64_t warmup_steps, double peak_lr);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LASR_H */
