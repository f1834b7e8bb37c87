#ifndef QUAKECAST_H
#define QUAKECAST_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum QcStatus {
  QC_STATUS_OK = 0,
  QC_STATUS_NULL_POINTER = 1,
  QC_STATUS_INVALID_ARGUMENT = 2,
  QC_STATUS_SHAPE = 3,
  QC_STATUS_DOMAIN = 4,
  QC_STATUS_CONFIG = 5,
  QC_STATUS_VERSION = 6,
  QC_STATUS_IO = 7,
  QC_STATUS_NUMERIC = 8,
  QC_STATUS_PANIC = 9,
} QcStatus;

/**
 * Opaque model handle.
 */
typedef struct QcModel QcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or an empty string.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *qc_last_error(void);

/**
 * Static, NUL-terminated library version.
 */
const char *qc_version(void);

/**
 * Builds a model from a JSON spec, or the default hybrid spec when
 * `spec_json` is null.
 *
 * # Safety
 * `spec_json` must be null or a NUL-terminated string; `out` must be valid
 * for writes.
 */
enum QcStatus qc_model_new(const char *spec_json, uint64_t seed, struct QcModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from this library not yet freed.
 */
void qc_model_free(struct QcModel *model);

/**
 * Loads a checkpoint (binary or JSON) into a new eval-mode model.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum QcStatus qc_model_load(const char *path, struct QcModel **out);

/**
 * Writes a checkpoint; binary for a `.bin` extension, JSON otherwise.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum QcStatus qc_model_save(const struct QcModel *model, const char *path);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum QcStatus qc_model_param_count(const struct QcModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum QcStatus qc_model_window(const struct QcModel *model, size_t *out);

/**
 * The model's spec as JSON. Free the string with `qc_string_free`.
 *
 * # Safety
 * `model` must be a live handle; `out` valid for writes.
 */
enum QcStatus qc_model_spec_json(const struct QcModel *model, char **out);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void qc_string_free(char *s);

/**
 * Eval-mode predictions for `n_samples` row-major windows of length
 * `window`, written to `out[0..n_samples]`.
 *
 * # Safety
 * `model` must be a live handle used by one thread at a time; `inputs` must
 * hold `n_samples * window` values and `out` room for `n_samples`.
 */
enum QcStatus qc_model_predict(struct QcModel *model,
                               const double *inputs,
                               size_t n_samples,
                               size_t window,
                               double *out);

/**
 * RMSE, MAE and R² of `n` paired values. Any output pointer may be null.
 *
 * # Safety
 * `y` and `y_hat` must hold `n` values.
 */
enum QcStatus qc_metrics(const double *y,
                         const double *y_hat,
                         size_t n,
                         double *rmse,
                         double *mae,
                         double *r2);

/**
 * Zero-order-hold imputation of `n` values into `out` (may alias `values`).
 *
 * # Safety
 * `values` and `out` must each hold `n` values.
 */
enum QcStatus qc_zoh_impute(const double *values, size_t n, double *out);

/**
 * Region 1–9 of a point in the default study grid.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum QcStatus qc_assign_region(double latitude, double longitude, uint8_t *out);

/**
 * Learning rate of `epoch` under linear decay over `epochs` epochs.
 *
 * # Safety
 * `out` must be valid for writes.
 */
enum QcStatus qc_lr_schedule(size_t epoch,
                             size_t epochs,
                             double lr_start,
                             double lr_end,
                             double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QUAKECAST_H */
