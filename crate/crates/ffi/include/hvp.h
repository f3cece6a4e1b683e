#ifndef HVP_H
#define HVP_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HvpStatus {
  HVP_STATUS_OK = 0,
  HVP_STATUS_NULL_POINTER = 1,
  HVP_STATUS_INVALID_ARGUMENT = 2,
  HVP_STATUS_DIMENSION = 3,
  HVP_STATUS_NUMERIC = 4,
  HVP_STATUS_IO = 5,
  HVP_STATUS_BUFFER_TOO_SMALL = 6,
  HVP_STATUS_PANIC = 7,
} HvpStatus;

/**
 * Sampling methods accepted by [`hvp_sample`].
 */
typedef enum HvpMethod {
  HVP_METHOD_UNGUIDED = 0,
  HVP_METHOD_STAGE1_ONLY = 1,
  HVP_METHOD_AHVP = 2,
  HVP_METHOD_AHVP_DET = 3,
  HVP_METHOD_SHVP = 4,
} HvpMethod;

/**
 * Opaque model handle.
 */
typedef struct HvpModel HvpModel;

/**
 * Evaluations spent per trajectory by one sampling call. The line-search
 * field is the total over all rows.
 */
typedef struct HvpCallCounts {
  uint64_t noise_policy;
  uint64_t policy;
  uint64_t denoiser;
  uint64_t inner_iterations;
  uint64_t line_search_evals;
} HvpCallCounts;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a model from config text with zero-initialized policies.
 *
 * # Safety
 * `config` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HvpStatus hvp_model_from_config(const char *config, struct HvpModel **out);

/**
 * Replaces the model's policies with those stored in a checkpoint file.
 *
 * # Safety
 * `model` must come from [`hvp_model_from_config`]; `path` must be a
 * NUL-terminated string.
 */
enum HvpStatus hvp_model_load_checkpoint(struct HvpModel *model, const char *path);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hvp_model_from_config`] and not be used again.
 */
void hvp_model_free(struct HvpModel *model);

/**
 * Signal dimension, measurement dimension and number of reverse steps.
 * Any output pointer may be null.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum HvpStatus hvp_model_dims(const struct HvpModel *model,
                              size_t *dim,
                              size_t *measurement_dim,
                              size_t *steps);

/**
 * Draws `n_samples` conditional samples for observation `y` into `out`
 * (row-major, `n_samples * dim` values). `mask` is read only for
 * random-mask tasks and may otherwise be null. `counts` may be null.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
enum HvpStatus hvp_sample(const struct HvpModel *model,
                          const double *y,
                          size_t y_len,
                          const double *mask,
                          size_t mask_len,
                          size_t n_samples,
                          uint64_t seed,
                          int32_t method,
                          double *out,
                          size_t out_len,
                          struct HvpCallCounts *counts);

/**
 * Measurement log-likelihood `log p(y | x)` under the model's task.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths; `out` must be valid.
 */
enum HvpStatus hvp_log_likelihood(const struct HvpModel *model,
                                  const double *y,
                                  size_t y_len,
                                  const double *x,
                                  size_t x_len,
                                  const double *mask,
                                  size_t mask_len,
                                  double *out);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on the same thread.
 */
const char *hvp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hvp_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HVP_H */
