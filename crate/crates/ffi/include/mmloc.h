#ifndef MMLOC_H
#define MMLOC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MmlocStatus {
  MMLOC_STATUS_OK = 0,
  MMLOC_STATUS_NULL_POINTER = 1,
  MMLOC_STATUS_INVALID_ARGUMENT = 2,
  MMLOC_STATUS_IO = 3,
  MMLOC_STATUS_FORMAT = 4,
  MMLOC_STATUS_NUMERIC = 5,
  MMLOC_STATUS_PANIC = 6,
} MmlocStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct MmlocModel MmlocModel;

typedef struct MmlocSummary {
  double mean;
  double median;
  double cdf90;
  size_t count;
} MmlocSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *mmloc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mmloc_version(void);

/**
 * Loads a JSON checkpoint. Free the handle with [`mmloc_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MmlocStatus mmloc_model_load(const char *path, struct MmlocModel **out);

/**
 * Releases a handle from [`mmloc_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`mmloc_model_load`] and not be used afterwards.
 */
void mmloc_model_free(struct MmlocModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MmlocStatus mmloc_model_num_streams(const struct MmlocModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MmlocStatus mmloc_model_window_len(const struct MmlocModel *model, size_t *out);

/**
 * Feature dimension of stream `stream`.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum MmlocStatus mmloc_model_stream_dim(const struct MmlocModel *model, size_t stream, size_t *out);

/**
 * Estimates the position for one window.
 *
 * `streams[m]` points at `window_len × dim(m)` curated features, row-major
 * with one row per time step, in the model's stream order. `out_xy`
 * receives two values; `out_alpha` (nullable) receives one importance
 * weight per stream.
 *
 * # Safety
 * All pointers must be valid for the sizes above.
 */
enum MmlocStatus mmloc_model_predict(const struct MmlocModel *model,
                                     const double *const *streams,
                                     size_t num_streams,
                                     double *out_xy,
                                     double *out_alpha);

/**
 * Mean, median and 90th-percentile of `n` localization errors.
 *
 * # Safety
 * `errors` must hold `n` values; `out` must be writable.
 */
enum MmlocStatus mmloc_summarize(const double *errors, size_t n, struct MmlocSummary *out);

/**
 * Position from `n` ranges to anchors given as `x0, y0, x1, y1, …`.
 * `out_residual` (nullable) receives the RMS range residual.
 *
 * # Safety
 * `anchors_xy` must hold `2n` values, `ranges` `n`, `out_xy` two.
 */
enum MmlocStatus mmloc_trilaterate(const double *anchors_xy,
                                   const double *ranges,
                                   size_t n,
                                   double *out_xy,
                                   double *out_residual);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMLOC_H */
