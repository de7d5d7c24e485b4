#ifndef FEFA_H
#define FEFA_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum FefaStatus {
  FEFA_STATUS_OK = 0,
  FEFA_STATUS_NULL_POINTER = 1,
  FEFA_STATUS_INVALID_UTF8 = 2,
  FEFA_STATUS_INVALID_ARGUMENT = 3,
  FEFA_STATUS_SHAPE = 4,
  FEFA_STATUS_UTTERANCE_TOO_SHORT = 5,
  FEFA_STATUS_SILENT_SIGNAL = 6,
  FEFA_STATUS_EER_UNDEFINED = 7,
  FEFA_STATUS_UNSUPPORTED_AUDIO = 8,
  FEFA_STATUS_CONFIG = 9,
  FEFA_STATUS_CHECKPOINT = 10,
  FEFA_STATUS_IO = 11,
  FEFA_STATUS_FORMAT = 12,
  FEFA_STATUS_BUFFER_TOO_SMALL = 13,
  FEFA_STATUS_PANIC = 14,
} FefaStatus;

typedef enum FefaNoise {
  FEFA_NOISE_GAUSSIAN = 0,
  FEFA_NOISE_UNIFORM = 1,
} FefaNoise;

/**
 * A trained speaker model with the front end it was trained on.
 */
typedef struct FefaModel FefaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fefa_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call into the library from this thread.
 */
const char *fefa_last_error(void);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum FefaStatus fefa_model_load(const char *path, struct FefaModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`fefa_model_load`] and not be used afterwards.
 */
void fefa_model_free(struct FefaModel *model);

/**
 * Embedding width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fefa_model_embedding_dim(const struct FefaModel *model);

/**
 * Frequency bins of the network input, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fefa_model_input_bins(const struct FefaModel *model);

/**
 * Number of attention layers, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fefa_model_attention_layers(const struct FefaModel *model);

/**
 * Speaker embedding of one utterance into `out[0..embedding_dim]`.
 *
 * # Safety
 * `model` must be a live handle, `samples` must hold `len` values and `out`
 * must hold `out_len` values.
 */
enum FefaStatus fefa_model_embed(const struct FefaModel *model,
                                 const double *samples,
                                 size_t len,
                                 uint32_t sample_rate,
                                 double *out,
                                 size_t out_len);

/**
 * Input-layer attention probabilities of one utterance into
 * `out[0..input_bins]`.
 *
 * # Safety
 * As for [`fefa_model_embed`].
 */
enum FefaStatus fefa_model_input_attention(const struct FefaModel *model,
                                           const double *samples,
                                           size_t len,
                                           uint32_t sample_rate,
                                           double *out,
                                           size_t out_len);

/**
 * Cosine similarity of two vectors of length `len`.
 *
 * # Safety
 * `a` and `b` must hold `len` values; `out` must be valid.
 */
enum FefaStatus fefa_cosine_score(const double *a, const double *b, size_t len, double *out);

/**
 * Equal error rate of `n` scores; `is_target[i]` nonzero marks a target
 * trial. `threshold` may be null.
 *
 * # Safety
 * `scores` and `is_target` must hold `n` values; `eer` must be valid.
 */
enum FefaStatus fefa_compute_eer(const double *scores,
                                 const uint8_t *is_target,
                                 size_t n,
                                 double *eer,
                                 double *threshold);

/**
 * Adds seeded noise at `snr_db` to `len` samples, writing `out[0..len]`.
 * `out` may alias `samples`.
 *
 * # Safety
 * `samples` and `out` must hold `len` values.
 */
enum FefaStatus fefa_add_noise(const double *samples,
                               size_t len,
                               enum FefaNoise kind,
                               double snr_db,
                               uint64_t seed,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEFA_H */
