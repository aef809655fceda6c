#ifndef IFA_H
#define IFA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum IfaStatus {
  IFA_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  IFA_STATUS_NULL = 1,
  IFA_STATUS_USAGE = 2,
  IFA_STATUS_DATA = 3,
  IFA_STATUS_IO = 4,
  IFA_STATUS_PANIC = 5,
} IfaStatus;

/**
 * Opaque archive handle.
 */
typedef struct IfaArchive IfaArchive;

/**
 * Opaque importance matrix handle.
 */
typedef struct IfaImportanceMatrix IfaImportanceMatrix;

typedef struct IfaArchiveInfo {
  size_t num_features;
  size_t num_classes;
  size_t spatial_rank;
  uint64_t sample_count;
} IfaArchiveInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null after a
 * successful one. Valid until the next call into the library on this thread.
 */
const char *ifa_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_archive` must be writable.
 */
enum IfaStatus ifa_archive_open(const char *path, struct IfaArchive **out_archive);

/**
 * # Safety
 * `archive` must come from [`ifa_archive_open`] and not be freed yet. Null is ignored.
 */
void ifa_archive_free(struct IfaArchive *archive);

/**
 * # Safety
 * `archive` must be a live handle; `info` must be writable.
 */
enum IfaStatus ifa_archive_info(const struct IfaArchive *archive, struct IfaArchiveInfo *info);

/**
 * Copies up to `capacity` sample ids (ascending) into `ids` and stores the
 * total count in `count`. Call with `capacity = 0` to size the buffer.
 *
 * # Safety
 * `ids` must hold `capacity` elements; `count` must be writable.
 */
enum IfaStatus ifa_archive_sample_ids(const struct IfaArchive *archive,
                                      uint64_t *ids,
                                      size_t capacity,
                                      size_t *count);

/**
 * Unified importance matrix over every labeled sample of the archive.
 * Scheme codes: 0 grad-cam, 1 grad-cam++, 2 xgrad-cam, 3 pixelwise-grad.
 *
 * # Safety
 * `archive` must be a live handle; `out_matrix` must be writable.
 */
enum IfaStatus ifa_im_build_unified(const struct IfaArchive *archive,
                                    uint32_t scheme,
                                    struct IfaImportanceMatrix **out_matrix);

/**
 * # Safety
 * `matrix` must be a live handle; `num_features` and `num_classes` writable.
 */
enum IfaStatus ifa_im_shape(const struct IfaImportanceMatrix *matrix,
                            size_t *num_features,
                            size_t *num_classes);

/**
 * Entry `(feature, class)`. Classes without samples read as NaN.
 *
 * # Safety
 * `matrix` must be a live handle; `value` writable.
 */
enum IfaStatus ifa_im_get(const struct IfaImportanceMatrix *matrix,
                          size_t feature,
                          size_t class_id,
                          double *value);

/**
 * # Safety
 * `matrix` must be a live handle; `path` NUL-terminated.
 */
enum IfaStatus ifa_im_write_csv(const struct IfaImportanceMatrix *matrix, const char *path);

/**
 * # Safety
 * `matrix` must come from this library and not be freed yet. Null is ignored.
 */
void ifa_im_free(struct IfaImportanceMatrix *matrix);

/**
 * Parameters of `tanh(alpha * x + beta)` mapping `p10 -> 0.1`, `p90 -> 0.9`.
 *
 * # Safety
 * `alpha` and `beta` must be writable.
 */
enum IfaStatus ifa_sigma_from_percentiles(double p10, double p90, double *alpha, double *beta);

/**
 * Applies the common-scale mapping in place.
 *
 * # Safety
 * `values` must hold `len` elements.
 */
enum IfaStatus ifa_apply_sigma(double p10, double p90, double *values, size_t len);

/**
 * Weighted features `W^f = w^f * A^f` for `num_features` feature-major
 * planes of `len / num_features` values each. `out_maps` receives `len` values.
 *
 * # Safety
 * `features`, `grads` and `out_maps` must each hold `len` elements.
 */
enum IfaStatus ifa_weighted_features(uint32_t scheme,
                                     const float *features,
                                     const float *grads,
                                     size_t len,
                                     size_t num_features,
                                     double *out_maps);

/**
 * Average increase and average drop, in percent, from per-job scores
 * `y` (original input) and `o` (masked input).
 *
 * # Safety
 * `y` and `o` must hold `len` elements; outputs must be writable.
 */
enum IfaStatus ifa_collect_inc_drop(const double *y,
                                    const double *o,
                                    size_t len,
                                    double *average_increase,
                                    double *average_drop);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IFA_H */
