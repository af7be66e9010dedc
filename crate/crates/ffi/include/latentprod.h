#ifndef LATENTPROD_H
#define LATENTPROD_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LpStatus {
  LP_STATUS_OK = 0,
  LP_STATUS_NULL_POINTER = 1,
  LP_STATUS_INVALID_ARGUMENT = 2,
  LP_STATUS_IO = 3,
  LP_STATUS_PARSE = 4,
  LP_STATUS_CONFIG = 5,
  LP_STATUS_DOMAIN = 6,
  LP_STATUS_NUMERICAL = 7,
  LP_STATUS_EMPTY_GROUP = 8,
  LP_STATUS_PANIC = 9,
} LpStatus;

/**
 * A fitted model.
 */
typedef struct LpFit LpFit;

/**
 * A validated firm panel.
 */
typedef struct LpPanel LpPanel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Error message of the last status-returning call on this thread, or
 * null if that call succeeded. The pointer stays valid until the next
 * call into this library from the same thread.
 */
const char *lp_last_error(void);

/**
 * Loads a panel CSV with standard column names (`firm, period, y, k, m`,
 * optional `l` and `s`).
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum LpStatus lp_panel_load_csv(const char *path, struct LpPanel **out);

/**
 * Draws a panel from the default simulation design. When `groups_out` is
 * not null it receives the 0-based true group of each of the `n` firms.
 *
 * # Safety
 * `out` must be valid; `groups_out`, if not null, must hold `n` elements.
 */
enum LpStatus lp_panel_simulate(size_t n,
                                size_t t,
                                uint64_t seed,
                                struct LpPanel **out,
                                uint32_t *groups_out);

/**
 * # Safety
 * `panel` must be null or a handle from this library.
 */
size_t lp_panel_num_firms(const struct LpPanel *panel);

/**
 * # Safety
 * `panel` must be null or a handle from this library.
 */
size_t lp_panel_num_observations(const struct LpPanel *panel);

/**
 * # Safety
 * `panel` must be null or a handle from this library, not yet freed.
 */
void lp_panel_free(struct LpPanel *panel);

/**
 * Fits `groups` groups with the share-equation moment layout (AR(1)
 * productivity with intercept). A non-positive or NaN `lambda` selects
 * the default `T^-0.25`.
 *
 * # Safety
 * `panel` must be a live handle and `out` a valid pointer.
 */
enum LpStatus lp_fit(const struct LpPanel *panel, size_t groups, double lambda, struct LpFit **out);

/**
 * # Safety
 * `fit` must be null or a handle from this library.
 */
size_t lp_fit_num_groups(const struct LpFit *fit);

/**
 * # Safety
 * `fit` must be null or a handle from this library.
 */
size_t lp_fit_num_params(const struct LpFit *fit);

/**
 * # Safety
 * `fit` must be null or a handle from this library.
 */
size_t lp_fit_num_firms(const struct LpFit *fit);

/**
 * Mean squared composite residual of the group estimates, NaN for null.
 *
 * # Safety
 * `fit` must be null or a handle from this library.
 */
double lp_fit_msr(const struct LpFit *fit);

/**
 * Writes the 0-based group of every firm, -1 for unclassified firms.
 *
 * # Safety
 * `out` must hold `len` elements.
 */
enum LpStatus lp_fit_assignment(const struct LpFit *fit, int32_t *out, size_t len);

/**
 * Post-Lasso parameters of a 0-based group.
 *
 * # Safety
 * `out` must hold `len` elements.
 */
enum LpStatus lp_fit_group_theta(const struct LpFit *fit, size_t group, double *out, size_t len);

/**
 * Standard errors matching [`lp_fit_group_theta`].
 *
 * # Safety
 * `out` must hold `len` elements.
 */
enum LpStatus lp_fit_group_std_errors(const struct LpFit *fit,
                                      size_t group,
                                      double *out,
                                      size_t len);

/**
 * The fit as a JSON document, or null on failure. Release it with
 * [`lp_string_free`].
 *
 * # Safety
 * `fit` must be null or a handle from this library.
 */
char *lp_fit_to_json(const struct LpFit *fit);

/**
 * # Safety
 * `s` must be null or a string returned by this library, not yet freed.
 */
void lp_string_free(char *s);

/**
 * # Safety
 * `fit` must be null or a handle from this library, not yet freed.
 */
void lp_fit_free(struct LpFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENTPROD_H */
