#ifndef NBGAM_H
#define NBGAM_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every exported function.
 */
typedef enum NbgamStatus {
  NBGAM_STATUS_OK = 0,
  NBGAM_STATUS_NULL_POINTER = 1,
  NBGAM_STATUS_INVALID_UTF8 = 2,
  NBGAM_STATUS_FORMULA_ERROR = 3,
  NBGAM_STATUS_DATA_ERROR = 4,
  NBGAM_STATUS_FIT_ERROR = 5,
  NBGAM_STATUS_NOT_CONVERGED = 6,
  NBGAM_STATUS_OUT_OF_DOMAIN = 7,
  NBGAM_STATUS_INVALID_ARGUMENT = 8,
  NBGAM_STATUS_BUFFER_TOO_SMALL = 9,
  NBGAM_STATUS_PANIC = 10,
} NbgamStatus;

/**
 * Count family selector for [`nbgam_fit`].
 */
typedef enum NbgamFamily {
  NBGAM_FAMILY_NEGATIVE_BINOMIAL = 0,
  NBGAM_FAMILY_POISSON = 1,
} NbgamFamily;

/**
 * Fitted model.
 */
typedef struct NbgamFit NbgamFit;

/**
 * Loaded unit-by-month panel.
 */
typedef struct NbgamPanel NbgamPanel;

/**
 * Scalar summary of a fit. `phi` is NaN for the Poisson family.
 */
typedef struct NbgamFitSummary {
  double edf_total;
  double deviance;
  double loglik;
  double aic;
  double gcv;
  double phi;
  uintptr_t n_obs;
  uintptr_t num_coefficients;
  uintptr_t num_smoothing_params;
  bool converged;
} NbgamFitSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a success.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *nbgam_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *nbgam_version(void);

/**
 * Release a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void nbgam_string_free(char *s);

/**
 * Load a panel CSV from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NbgamStatus nbgam_panel_load(const char *path, struct NbgamPanel **out);

/**
 * Parse a panel from CSV text held in memory.
 *
 * # Safety
 * `csv_text` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NbgamStatus nbgam_panel_from_csv(const char *csv_text, struct NbgamPanel **out);

/**
 * # Safety
 * `panel` must come from a panel constructor and must not be used afterwards.
 */
void nbgam_panel_free(struct NbgamPanel *panel);

/**
 * Number of unit-month rows, or 0 for a null handle.
 *
 * # Safety
 * `panel` must be null or a live panel handle.
 */
uintptr_t nbgam_panel_num_rows(const struct NbgamPanel *panel);

/**
 * Fit `formula` to `panel` with GCV smoothing selection. `offset` is
 * `person-years`, `none` or `column:NAME`; null selects `person-years`.
 * An unconverged fit is still returned through `out`, with status
 * `NotConverged`.
 *
 * # Safety
 * Pointers must be valid; strings NUL-terminated.
 */
enum NbgamStatus nbgam_fit(const struct NbgamPanel *panel,
                           const char *formula,
                           enum NbgamFamily family,
                           const char *offset,
                           struct NbgamFit **out);

/**
 * # Safety
 * `fit` must come from [`nbgam_fit`] or [`nbgam_fit_from_json`] and must not be used afterwards.
 */
void nbgam_fit_free(struct NbgamFit *fit);

/**
 * Serialize a fit to JSON; release the string with [`nbgam_string_free`].
 *
 * # Safety
 * `fit` must be a live handle and `out` a valid pointer.
 */
enum NbgamStatus nbgam_fit_to_json(const struct NbgamFit *fit, char **out);

/**
 * Restore a fit from its JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NbgamStatus nbgam_fit_from_json(const char *json, struct NbgamFit **out);

/**
 * # Safety
 * `fit` must be a live handle and `out` a valid pointer.
 */
enum NbgamStatus nbgam_fit_summary(const struct NbgamFit *fit, struct NbgamFitSummary *out);

/**
 * Copy the coefficients into `buf`. `needed` always receives the count; when
 * `capacity` is smaller the status is `BufferTooSmall` and nothing is copied.
 *
 * # Safety
 * `buf` must hold `capacity` doubles (it may be null when `capacity` is 0).
 */
enum NbgamStatus nbgam_fit_coefficients(const struct NbgamFit *fit,
                                        double *buf,
                                        uintptr_t capacity,
                                        uintptr_t *needed);

/**
 * Predict rates at `num_rows` points. `values` is row-major with one column
 * per entry of `names`; `rates` receives one value per row (per 100,000
 * person-years under the default offset).
 *
 * # Safety
 * `names` must hold `num_vars` strings, `values` `num_rows * num_vars`
 * doubles and `rates` `num_rows` doubles.
 */
enum NbgamStatus nbgam_predict(const struct NbgamFit *fit,
                               const char *const *names,
                               uintptr_t num_vars,
                               const double *values,
                               uintptr_t num_rows,
                               double *rates);

/**
 * Negative binomial log-pmf with mean `mu` and dispersion `phi`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NbgamStatus nbgam_nb_logpmf(uint64_t y, double mu, double phi, double *out);

/**
 * Parse a formula and return its canonical text.
 *
 * # Safety
 * `formula` must be a NUL-terminated string and `out` a valid pointer.
 */
enum NbgamStatus nbgam_parse_formula(const char *formula, char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NBGAM_H */
