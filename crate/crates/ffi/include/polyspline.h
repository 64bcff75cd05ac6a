#ifndef POLYSPLINE_H
#define POLYSPLINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum PsStatus {
  PS_STATUS_OK = 0,
  PS_STATUS_NULL_POINTER = 1,
  PS_STATUS_INVALID_ARGUMENT = 2,
  PS_STATUS_OUT_OF_DOMAIN = 3,
  PS_STATUS_DIMENSION_MISMATCH = 4,
  PS_STATUS_SINGULAR = 5,
  PS_STATUS_NON_FINITE = 6,
  PS_STATUS_IO = 7,
  PS_STATUS_FORMAT = 8,
  PS_STATUS_PANIC = 9,
} PsStatus;

/**
 * LSGD mode selector for `ps_model_train`.
 */
typedef enum PsLsgdMode {
  PS_LSGD_MODE_LAYER = 0,
  PS_LSGD_MODE_CALLBACK = 1,
} PsLsgdMode;

/**
 * Opaque model handle.
 */
typedef struct PsModel PsModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ps_last_error(void);

/**
 * Create a model on `[0, 1]^dim` with uniform knots, seeded random gating
 * and zero coefficients.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum PsStatus ps_model_new(size_t dim,
                           size_t n_splines,
                           size_t n_cells,
                           size_t degree,
                           uint64_t seed,
                           struct PsModel **out);

/**
 * Load a model from a JSON checkpoint.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer to
 * writable storage for one handle.
 */
enum PsStatus ps_model_load(const char *path, struct PsModel **out);

/**
 * Write the model as a JSON checkpoint.
 *
 * # Safety
 * `model` must be a live handle and `path` a nul-terminated string.
 */
enum PsStatus ps_model_save(const struct PsModel *model, const char *path);

/**
 * Release a handle. NULL is ignored.
 *
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ps_model_free(struct PsModel *model);

/**
 * Spatial dimension of the model, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t ps_model_dim(const struct PsModel *model);

/**
 * Number of expert coefficients, or 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t ps_model_n_coeffs(const struct PsModel *model);

/**
 * Copy the coefficients into `out`, which must hold exactly
 * `ps_model_n_coeffs` values.
 *
 * # Safety
 * `model` must be a live handle and `out` valid for `len` writes.
 */
enum PsStatus ps_model_get_coeffs(const struct PsModel *model, double *out, size_t len);

/**
 * Replace the coefficients.
 *
 * # Safety
 * `model` must be a live handle and `coeffs` valid for `len` reads.
 */
enum PsStatus ps_model_set_coeffs(struct PsModel *model, const double *coeffs, size_t len);

/**
 * Evaluate the model at `n_points` points stored row-major in `coords`
 * (`n_points * dim` values). Writes `n_points` values to `values` and, if
 * `grads` is not NULL, `n_points * dim` gradient entries row-major.
 *
 * # Safety
 * `model` must be a live handle; `coords`, `values` and a non-NULL `grads`
 * must be valid for the stated lengths.
 */
enum PsStatus ps_model_eval(const struct PsModel *model,
                            const double *coords,
                            size_t n_points,
                            double *values,
                            double *grads);

/**
 * Train the model on a named benchmark problem (`p1-sine`, `p2-kinks`,
 * `p3-poisson1d`, `p4-slit`) with that problem's settings, overriding the
 * epoch count when `epochs > 0`. Writes the final loss to `loss` if it is
 * not NULL.
 *
 * # Safety
 * `model` must be a live handle and `problem` a nul-terminated string.
 */
enum PsStatus ps_model_train(struct PsModel *model,
                             const char *problem,
                             enum PsLsgdMode mode,
                             size_t epochs,
                             uint64_t seed,
                             double *loss);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYSPLINE_H */
