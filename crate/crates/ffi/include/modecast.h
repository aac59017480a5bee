#ifndef MODECAST_H
#define MODECAST_H

/* Generated by cbindgen from the modecast-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum McStatus {
  // Success.
  MC_STATUS_OK = 0,
  // A required pointer argument was NULL.
  MC_STATUS_NULL_ARG = 1,
  // An argument violated a documented precondition.
  MC_STATUS_INVALID_ARG = 2,
  // The computation failed on a numerical domain problem.
  MC_STATUS_NUMERIC = 3,
  // An internal invariant failed; treat the library state as poisoned.
  MC_STATUS_PANIC = 4,
} McStatus;

// Opaque decomposition result; release with [`mc_vmd_free`].
typedef struct McVmd McVmd;

// Decomposition settings; obtain defaults from [`mc_vmd_params_default`].
typedef struct McVmdParams {
  // Number of modes to extract; must be >= 1.
  size_t k;
  // Bandwidth penalty; larger values give narrower modes.
  double alpha;
  // Dual-ascent step; 0 disables the Lagrangian multiplier.
  double tau;
  // Convergence threshold on the summed relative spectral change.
  double tol;
  size_t max_iter;
  // Lock the first mode's centre frequency to 0 (trend capture).
  bool dc_mode;
} McVmdParams;

// Forecast accuracy summary. `r2` is meaningful only when `has_r2` is
// true; it is undefined for a constant truth series.
typedef struct McMetrics {
  double mae;
  double mse;
  double rmse;
  double r2;
  bool has_r2;
  size_t n;
} McMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the most recent failure on this thread, empty when
// the last call succeeded. The pointer stays valid until the next ABI
// call from the same thread; copy the string if it must outlive that.
const char *mc_last_error(void);

// Library default decomposition settings (k=4, alpha=2000, tau=0,
// tol=1e-7, max_iter=500, dc_mode off).
struct McVmdParams mc_vmd_params_default(void);

// Decomposes `signal[0..n]` into `params.k` band-limited modes.
//
// On success `*out` owns a new handle. `n` must be at least `2 * k` and
// the signal finite.
//
// # Safety
// `signal` must point to `n` readable doubles and `out` to a writable
// pointer slot.
enum McStatus mc_vmd_decompose(const double *signal,
                               size_t n,
                               struct McVmdParams params,
                               struct McVmd **out);

// Number of modes in the handle; 0 for NULL.
size_t mc_vmd_mode_count(const struct McVmd *handle);

// Length of every mode (= input length); 0 for NULL.
size_t mc_vmd_len(const struct McVmd *handle);

// ADMM iterations performed; 0 for NULL.
size_t mc_vmd_iterations(const struct McVmd *handle);

// Whether the tolerance was reached before `max_iter`; false for NULL.
bool mc_vmd_converged(const struct McVmd *handle);

// Copies mode `index` (0-based, ascending centre frequency) into `out`.
//
// # Safety
// `out` must point to `capacity` writable doubles.
enum McStatus mc_vmd_copy_mode(const struct McVmd *handle,
                               size_t index,
                               double *out,
                               size_t capacity);

// Copies `signal - sum(modes)` into `out`.
//
// # Safety
// `out` must point to `capacity` writable doubles.
enum McStatus mc_vmd_copy_residual(const struct McVmd *handle, double *out, size_t capacity);

// Copies the normalised centre frequencies (ascending, in [0, 0.5],
// cycles per sample) into `out`.
//
// # Safety
// `out` must point to `capacity` writable doubles.
enum McStatus mc_vmd_copy_center_freqs(const struct McVmd *handle, double *out, size_t capacity);

// Releases a handle. NULL is a no-op; freeing twice is undefined.
void mc_vmd_free(struct McVmd *handle);

// Normalised mutual information of two equal-length series, in [0, 1].
// Histograms use equal-frequency bins, `floor(n^0.4)` clamped to [4, 32].
//
// # Safety
// `x` and `y` must point to `n` readable doubles, `out` to one writable.
enum McStatus mc_mic(const double *x, const double *y, size_t n, double *out);

// Fuzzy entropy of `x[0..n]` with embedding dimension `m` and tolerance
// `r_std_fraction * std(x)`. A constant sequence scores exactly 0.
//
// # Safety
// `x` must point to `n` readable doubles, `out` to one writable.
enum McStatus mc_fuzzy_entropy(const double *x,
                               size_t n,
                               size_t m,
                               double r_std_fraction,
                               double *out);

// Robust loss of residual `z` with shape `beta` and scale `c > 0`.
// `beta = 2` is squared error / 2, `beta = 0` the log form, large
// negative `beta` approaches a bounded saturating loss.
//
// # Safety
// `out` must point to one writable double.
enum McStatus mc_robust_loss(double z, double beta, double c, double *out);

// Centralizes a row-major `rows x cols` gradient in place: subtracts
// from every column its mean, so each column of the result sums to zero.
// Apply to weight matrices only; bias vectors are conventionally left
// alone (`rows = 1` would zero them entirely).
//
// # Safety
// `grad` must point to `rows * cols` writable doubles.
enum McStatus mc_centralize_gradient(double *grad, size_t rows, size_t cols);

// Computes MAE, MSE, RMSE and R^2 of `pred` against `truth`.
//
// # Safety
// `pred` and `truth` must point to `n` readable doubles, `out` to one
// writable [`McMetrics`].
enum McStatus mc_forecast_metrics(const double *pred,
                                  const double *truth,
                                  size_t n,
                                  struct McMetrics *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MODECAST_H */
