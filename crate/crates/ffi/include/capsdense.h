#ifndef CAPSDENSE_H
#define CAPSDENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every fallible function.
 */
typedef enum CdStatus {
  CD_STATUS_OK = 0,
  CD_STATUS_NULL_POINTER = 1,
  CD_STATUS_INVALID_ARGUMENT = 2,
  CD_STATUS_CONFIG = 3,
  CD_STATUS_FORMAT = 4,
  CD_STATUS_INTEGRITY = 5,
  CD_STATUS_NUMERICAL = 6,
  CD_STATUS_IO = 7,
  CD_STATUS_PANIC = 8,
} CdStatus;

/**
 * Opaque model handle.
 */
typedef struct CdModel CdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *cd_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cd_version(void);

/**
 * Builds a freshly initialized model from a named preset.
 *
 * # Safety
 * `name` must be a NUL-terminated string; `out` must be writable.
 */
enum CdStatus cd_model_from_preset(const char *name, uint64_t seed, struct CdModel **out);

/**
 * Loads a checkpoint written by the CLI (with its `.json` spec sidecar).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum CdStatus cd_model_load(const char *path, struct CdModel **out);

/**
 * Writes the model as a checkpoint (fresh optimizer state) plus spec sidecar.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum CdStatus cd_model_save(const struct CdModel *model, const char *path);

/**
 * Releases a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void cd_model_free(struct CdModel *model);

/**
 * Total number of scalar parameters.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum CdStatus cd_model_param_count(const struct CdModel *model, uint64_t *out);

/**
 * Input `(channels, height, width)`, number of classes and the width of
 * the concatenated class capsule.
 *
 * # Safety
 * `model` must come from this library; every out pointer must be writable.
 */
enum CdStatus cd_model_shape(const struct CdModel *model,
                             size_t *channels,
                             size_t *height,
                             size_t *width,
                             size_t *num_classes,
                             size_t *capsule_dim);

/**
 * Classifies `n` images laid out as `[n, C, H, W]` floats. Writes `n`
 * predicted classes to `labels` and, when `lengths` is not NULL, the
 * `n * K` class-capsule lengths.
 *
 * # Safety
 * `images` must hold `n*C*H*W` floats, `labels` room for `n` values and
 * `lengths` (if given) room for `n*K` floats.
 */
enum CdStatus cd_model_predict(const struct CdModel *model,
                               const float *images,
                               size_t n,
                               uint32_t *labels,
                               float *lengths);

/**
 * Squashes `count` vectors of length `dim` from `input` into `output`
 * (which may alias `input`).
 *
 * # Safety
 * `input` and `output` must each hold `count*dim` floats.
 */
enum CdStatus cd_squash(const float *input, size_t count, size_t dim, float *output);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAPSDENSE_H */
