#ifndef STALE_LAB_H
#define STALE_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum StaleStatus {
  STALE_STATUS_OK = 0,
  STALE_STATUS_NULL_POINTER = 1,
  STALE_STATUS_INVALID_ARGUMENT = 2,
  STALE_STATUS_IO = 3,
  STALE_STATUS_FORMAT = 4,
  STALE_STATUS_NUMERICAL = 5,
  STALE_STATUS_BUFFER_TOO_SMALL = 6,
  STALE_STATUS_PANIC = 7,
} StaleStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct StaleModel StaleModel;

/**
 * A scored segment in normalized time.
 */
typedef struct StaleDetection {
  double start;
  double end;
  uint32_t class_index;
  double confidence;
  uint32_t source_snippet;
} StaleDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `len` bytes.
 */
size_t stale_last_error(char *buf, size_t len);

/**
 * Temporal IoU of `[a_start, a_end]` and `[b_start, b_end]`.
 */
double stale_tiou(double a_start, double a_end, double b_start, double b_end);

/**
 * Classwise gaussian SoftNMS. Writes at most `capacity` detections to `out`
 * and their count to `out_len`.
 *
 * # Safety
 * `dets` must hold `n` elements and `out` `capacity` elements.
 */
enum StaleStatus stale_soft_nms(const struct StaleDetection *dets,
                                size_t n,
                                double sigma,
                                double score_floor,
                                size_t max_detections,
                                struct StaleDetection *out,
                                size_t capacity,
                                size_t *out_len);

/**
 * Interpolated average precision of one class. Detections and ground truths
 * are parallel arrays; `*_video` values identify the video of each segment.
 *
 * # Safety
 * Each detection array must hold `n_dets` elements and each ground-truth
 * array `n_gts`.
 */
enum StaleStatus stale_average_precision(const uint32_t *det_video,
                                         const double *det_start,
                                         const double *det_end,
                                         const double *det_score,
                                         size_t n_dets,
                                         const uint32_t *gt_video,
                                         const double *gt_start,
                                         const double *gt_end,
                                         size_t n_gts,
                                         double tau,
                                         double *out_ap);

/**
 * Loads a checkpoint manifest written by the training command.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writing.
 */
enum StaleStatus stale_model_load(const char *path, struct StaleModel **out);

/**
 * Releases a handle from [`stale_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must come from [`stale_model_load`] and not be used afterwards.
 */
void stale_model_free(struct StaleModel *model);

/**
 * Feature rows, token width and snippet count expected by the model.
 *
 * # Safety
 * `model` must be a live handle; outputs may be null.
 */
enum StaleStatus stale_model_dims(const struct StaleModel *model,
                                  size_t *input_dim,
                                  size_t *token_dim,
                                  size_t *t_len);

/**
 * Forward pass on `features` (`input_dim x t`, row-major) against class
 * tokens (`k x token_dim`). Writes `P` (`(k+1) x t`) and `M` (`t x t`).
 *
 * # Safety
 * Buffers must match the sizes above.
 */
enum StaleStatus stale_model_forward(const struct StaleModel *model,
                                     const double *features,
                                     size_t t,
                                     const double *tokens,
                                     size_t k,
                                     double *out_p,
                                     double *out_m);

/**
 * Forward pass plus default post-processing with class threshold `theta_c`.
 *
 * # Safety
 * As for [`stale_model_forward`]; `out` must hold `capacity` detections.
 */
enum StaleStatus stale_model_detect(const struct StaleModel *model,
                                    const double *features,
                                    size_t t,
                                    const double *tokens,
                                    size_t k,
                                    double theta_c,
                                    struct StaleDetection *out,
                                    size_t capacity,
                                    size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STALE_LAB_H */
