#ifndef PLAINDET_H
#define PLAINDET_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_ARGUMENT = 2,
  PD_STATUS_IO = 3,
  PD_STATUS_CHECKPOINT = 4,
  PD_STATUS_CONFIG = 5,
  PD_STATUS_DIMENSION = 6,
  PD_STATUS_INTERNAL = 7,
} PdStatus;

typedef enum PdSoftNmsMethod {
  PD_SOFT_NMS_METHOD_LINEAR = 0,
  PD_SOFT_NMS_METHOD_GAUSSIAN = 1,
} PdSoftNmsMethod;

typedef enum PdPlacement {
  PD_PLACEMENT_EVENLY = 0,
  PD_PLACEMENT_FIRST_K = 1,
  PD_PLACEMENT_LAST_K = 2,
} PdPlacement;

/**
 * Detections for one image.
 */
typedef struct PdDetections PdDetections;

/**
 * A loaded detector.
 */
typedef struct PdDetector PdDetector;

typedef struct PdBox {
  double x1;
  double y1;
  double x2;
  double y2;
} PdBox;

typedef struct PdDetection {
  struct PdBox bbox;
  /**
   * Zero-based foreground class.
   */
  uint32_t class_id;
  double score;
} PdDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *pd_last_error_message(void);

/**
 * Load a checkpoint (with its embedded config) into a new detector.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PdStatus pd_detector_load(const char *path, struct PdDetector **out);

/**
 * # Safety
 * `det` must come from [`pd_detector_load`] and not be used afterwards.
 */
void pd_detector_free(struct PdDetector *det);

/**
 * Detect objects in one `[3, height, width]` image of `f64` values in [0, 1].
 *
 * # Safety
 * `pixels` must point at `3 * height * width` values; `det` and `out` must
 * be valid.
 */
enum PdStatus pd_detector_detect(const struct PdDetector *det,
                                 const double *pixels,
                                 size_t height,
                                 size_t width,
                                 struct PdDetections **out);

/**
 * # Safety
 * `dets` must be null or a live handle from [`pd_detector_detect`].
 */
size_t pd_detections_len(const struct PdDetections *dets);

/**
 * # Safety
 * `dets` must be a live handle and `out` valid.
 */
enum PdStatus pd_detections_get(const struct PdDetections *dets,
                                size_t index,
                                struct PdDetection *out);

/**
 * # Safety
 * `dets` must come from [`pd_detector_detect`] and not be used afterwards.
 */
void pd_detections_free(struct PdDetections *dets);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PdStatus pd_iou(const struct PdBox *a, const struct PdBox *b, double *out);

/**
 * Soft-NMS over `n` boxes. Writes the kept indices (selection order) and
 * their decayed scores to arrays of capacity `n`, and the count to `out_len`.
 *
 * # Safety
 * `boxes` and `scores` must hold `n` entries; `out_indices` and
 * `out_scores` must have room for `n`.
 */
enum PdStatus pd_soft_nms(const struct PdBox *boxes,
                          const double *scores,
                          size_t n,
                          enum PdSoftNmsMethod method,
                          double nt,
                          double sigma,
                          double score_floor,
                          size_t *out_indices,
                          double *out_scores,
                          size_t *out_len);

/**
 * Indices of the blocks that carry propagation. Writes at most `capacity`
 * entries and the full count to `out_len`.
 *
 * # Safety
 * `out` must have room for `capacity` entries; `out_len` must be valid.
 */
enum PdStatus pd_propagation_indices(size_t depth,
                                     size_t count,
                                     enum PdPlacement placement,
                                     size_t *out,
                                     size_t capacity,
                                     size_t *out_len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *pd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PLAINDET_H */
