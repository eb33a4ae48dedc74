#ifndef SEGSENSE_H
#define SEGSENSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SegsenseStatus {
  SEGSENSE_STATUS_OK = 0,
  SEGSENSE_STATUS_NULL_POINTER = 1,
  SEGSENSE_STATUS_INVALID_ARGUMENT = 2,
  SEGSENSE_STATUS_DIMENSION_MISMATCH = 3,
  SEGSENSE_STATUS_EMPTY = 4,
  SEGSENSE_STATUS_RANK_DEFICIENT = 5,
  SEGSENSE_STATUS_NOT_CONVERGED = 6,
  SEGSENSE_STATUS_UNIT_MISMATCH = 7,
  SEGSENSE_STATUS_INTERNAL = 8,
} SegsenseStatus;

typedef enum SegsenseUnits {
  SEGSENSE_UNITS_INDEX = 0,
  SEGSENSE_UNITS_IMAGES = 1,
} SegsenseUnits;

// Binary ground-truth mask.
typedef struct SegsenseMask SegsenseMask;

// Metric parameters. Zero-initialized fields are invalid; start from
// `segsense_metric_config_default`.
typedef struct SegsenseMetricConfig {
  double beta;
  double delta;
  double bce_clamp;
  double spacing_dy;
  double spacing_dx;
} SegsenseMetricConfig;

typedef struct SegsenseMetrics {
  double dice;
  double f_score;
  double iou;
  double rmse;
  double loss_bce;
  double loss_dice;
  // NaN when `hausdorff_defined` is 0.
  double hausdorff;
  uint8_t hausdorff_defined;
} SegsenseMetrics;

typedef struct SegsenseExpFit {
  double a;
  double esr;
  double c;
  double residual_rms;
  uint32_t iterations;
  uint8_t degenerate;
} SegsenseExpFit;

typedef struct SegsenseSurfaceFit {
  double p00;
  double p10;
  double p01;
  double residual_rms;
  enum SegsenseUnits units;
} SegsenseSurfaceFit;

typedef struct SegsenseBoxStats {
  double min;
  double q1;
  double median;
  double q3;
  double max;
  double stddev;
  size_t n;
} SegsenseBoxStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *segsense_last_error(void);

// Library name and version as a static NUL-terminated string.
const char *segsense_version(void);

struct SegsenseMetricConfig segsense_metric_config_default(void);

// Creates a mask from `width * height` row-major bytes; nonzero is foreground.
//
// # Safety
// `data` must point to `width * height` bytes and `out` must be writable.
enum SegsenseStatus segsense_mask_new(size_t width,
                                      size_t height,
                                      const uint8_t *data,
                                      struct SegsenseMask **out);

// Creates a mask by thresholding 8-bit intensities: foreground is `> cutoff`.
//
// # Safety
// As for `segsense_mask_new`.
enum SegsenseStatus segsense_mask_from_gray(size_t width,
                                            size_t height,
                                            const uint8_t *data,
                                            uint8_t cutoff,
                                            struct SegsenseMask **out);

// # Safety
// `mask` must be null or a handle from this library not yet freed.
void segsense_mask_free(struct SegsenseMask *mask);

// # Safety
// `mask` must be a live handle and `width`/`height` writable.
enum SegsenseStatus segsense_mask_dims(const struct SegsenseMask *mask,
                                       size_t *width,
                                       size_t *height);

// # Safety
// `mask` must be a live handle and `count` writable.
enum SegsenseStatus segsense_mask_foreground_count(const struct SegsenseMask *mask, size_t *count);

// Scores a soft prediction (`width * height` values in [0, 1], row-major)
// against `gt`. A null `config` uses the defaults.
//
// # Safety
// `gt` must be a live handle, `pred` must hold `width * height` doubles of
// the mask's size, `config` null or readable, `out` writable.
enum SegsenseStatus segsense_evaluate(const struct SegsenseMask *gt,
                                      const double *pred,
                                      size_t pred_width,
                                      size_t pred_height,
                                      const struct SegsenseMetricConfig *config,
                                      struct SegsenseMetrics *out);

// Fits `value = a·exp(−esr·epoch) + c` to `n` points with increasing epochs.
// On `NotConverged` the best parameters found are still written to `out`.
//
// # Safety
// `epochs` and `values` must hold `n` doubles; `out` must be writable.
enum SegsenseStatus segsense_fit_exponential(const double *epochs,
                                             const double *values,
                                             size_t n,
                                             struct SegsenseExpFit *out);

// # Safety
// `fit` must be readable.
double segsense_eval_exponential(const struct SegsenseExpFit *fit, double epoch);

// Least-squares plane `p00 + p10·ntrain + p01·ntest` through `n` samples.
//
// # Safety
// `ntrain`, `ntest` and `values` must hold `n` doubles; `out` must be writable.
enum SegsenseStatus segsense_fit_surface(const double *ntrain,
                                         const double *ntest,
                                         const double *values,
                                         size_t n,
                                         enum SegsenseUnits units,
                                         struct SegsenseSurfaceFit *out);

// Evaluates a surface at a query point given in `units`.
//
// # Safety
// `fit` must be readable and `out` writable.
enum SegsenseStatus segsense_eval_surface(const struct SegsenseSurfaceFit *fit,
                                          double ntrain,
                                          double ntest,
                                          enum SegsenseUnits units,
                                          double *out);

// Five-number summary and sample standard deviation of `n` values.
//
// # Safety
// `values` must hold `n` doubles; `out` must be writable.
enum SegsenseStatus segsense_box_stats(const double *values,
                                       size_t n,
                                       struct SegsenseBoxStats *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGSENSE_H */
