#ifndef LMMSEL_H
#define LMMSEL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmmselStatus {
  LMMSEL_STATUS_OK = 0,
  LMMSEL_STATUS_NULL_POINTER = 1,
  LMMSEL_STATUS_INVALID_ARGUMENT = 2,
  LMMSEL_STATUS_DATA_ERROR = 3,
  LMMSEL_STATUS_NUMERIC_ERROR = 4,
  LMMSEL_STATUS_BUFFER_TOO_SMALL = 5,
  LMMSEL_STATUS_PANIC = 6,
} LmmselStatus;

typedef enum LmmselSelector {
  LMMSEL_SELECTOR_LASSO = 0,
  LMMSEL_SELECTOR_ADAPTIVE_LASSO = 1,
} LmmselSelector;

typedef enum LmmselCriterion {
  LMMSEL_CRITERION_BIC = 0,
  LMMSEL_CRITERION_EBIC = 1,
} LmmselCriterion;

// Response, design and random-effect specification.
typedef struct LmmselData LmmselData;

// Result of a fit or of a tuning run.
typedef struct LmmselFit LmmselFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// The pointer stays valid until the next call on the same thread.
const char *lmmsel_last_error(void);

// Library version as a static NUL-terminated string.
const char *lmmsel_version(void);

// Creates a data handle from `y` (length `n`) and the column-major `n x p`
// design `x`.
//
// # Safety
// `y` must point to `n` doubles, `x` to `n * p` doubles and `out` to
// writable storage for one pointer.
enum LmmselStatus lmmsel_data_new(size_t n,
                                  size_t p,
                                  const double *y,
                                  const double *x,
                                  struct LmmselData **out);

// Adds a random effect grouped by the 0-based `levels` (length `n`).
// `column < 0` gives a random intercept, otherwise a slope on that column
// of X.
//
// # Safety
// `data` must be a live handle, `name` a NUL-terminated string or null,
// and `levels` must point to `n` values.
enum LmmselStatus lmmsel_data_add_effect(struct LmmselData *data,
                                         const char *name,
                                         const uint32_t *levels,
                                         size_t n,
                                         int64_t column);

// By default an all-ones column of X is left unpenalized.
//
// # Safety
// `data` must be a live handle.
enum LmmselStatus lmmsel_data_penalize_intercept(struct LmmselData *data, bool penalize);

// # Safety
// `data` must be null or a handle from `lmmsel_data_new` not yet freed.
void lmmsel_data_free(struct LmmselData *data);

// Fits at a fixed penalty `lambda`. `selector` is an `LmmselSelector`.
//
// # Safety
// `data` must be a live handle and `out` writable.
enum LmmselStatus lmmsel_fit(const struct LmmselData *data,
                             double lambda,
                             int32_t selector,
                             struct LmmselFit **out);

// Fits along a log-spaced grid of `grid_size` penalties and keeps the fit
// minimizing `criterion` (an `LmmselCriterion`).
//
// # Safety
// `data` must be a live handle and `out` writable.
enum LmmselStatus lmmsel_tune(const struct LmmselData *data,
                              size_t grid_size,
                              int32_t selector,
                              int32_t criterion,
                              struct LmmselFit **out);

// # Safety
// `fit` must be null or a handle returned by `lmmsel_fit` / `lmmsel_tune`.
void lmmsel_fit_free(struct LmmselFit *fit);

// Copies the `p` fixed-effect estimates into `out`.
//
// # Safety
// `fit` must be a live handle; `out` must hold `len` doubles.
enum LmmselStatus lmmsel_fit_beta(const struct LmmselFit *fit, double *out, size_t len);

// Copies one variance per random effect (0 for deleted effects).
//
// # Safety
// `fit` must be a live handle; `out` must hold `len` doubles.
enum LmmselStatus lmmsel_fit_sigma2(const struct LmmselFit *fit, double *out, size_t len);

// Number of fixed-effect columns.
//
// # Safety
// `fit` must be a live handle or null (returns 0).
size_t lmmsel_fit_p(const struct LmmselFit *fit);

// Number of random effects in the original specification.
//
// # Safety
// `fit` must be a live handle or null (returns 0).
size_t lmmsel_fit_q(const struct LmmselFit *fit);

// Residual variance; NaN for a null handle.
//
// # Safety
// `fit` must be a live handle or null.
double lmmsel_fit_sigma2_e(const struct LmmselFit *fit);

// Penalized objective (-2 log-likelihood plus penalty); NaN for null.
//
// # Safety
// `fit` must be a live handle or null.
double lmmsel_fit_objective(const struct LmmselFit *fit);

// Penalty the fit was computed at; NaN for null.
//
// # Safety
// `fit` must be a live handle or null.
double lmmsel_fit_lambda(const struct LmmselFit *fit);

// Number of selected fixed effects.
//
// # Safety
// `fit` must be a live handle or null (returns 0).
size_t lmmsel_fit_support_size(const struct LmmselFit *fit);

// # Safety
// `fit` must be a live handle or null (returns false).
bool lmmsel_fit_converged(const struct LmmselFit *fit);

// # Safety
// `fit` must be a live handle or null (returns 0).
size_t lmmsel_fit_iterations(const struct LmmselFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMMSEL_H */
