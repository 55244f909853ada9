#ifndef AFFECT_BNN_H
#define AFFECT_BNN_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every entry point.
 */
typedef enum AbnStatus {
  ABN_STATUS_OK = 0,
  ABN_STATUS_NULL_POINTER = 1,
  ABN_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Output buffer too small; the required length is reported.
   */
  ABN_STATUS_BUFFER_TOO_SMALL = 3,
  ABN_STATUS_IO = 4,
  ABN_STATUS_INVALID_CHECKPOINT = 5,
  ABN_STATUS_RUNTIME = 6,
  ABN_STATUS_PANIC = 7,
} AbnStatus;

/**
 * Trained system inside a checkpoint.
 */
typedef enum AbnSystem {
  ABN_SYSTEM_MU = 0,
  ABN_SYSTEM_LU = 1,
  ABN_SYSTEM_STL = 2,
  ABN_SYSTEM_MTL_PU = 3,
} AbnSystem;

/**
 * Opaque model handle.
 */
typedef struct AbnModel AbnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or valid for `len` writes.
 */
size_t abn_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint file. On success `*out` owns a handle that must be
 * released with [`abn_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for one write.
 */
enum AbnStatus abn_model_load(const char *path, struct AbnModel **out);

/**
 * Releases a handle from [`abn_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void abn_model_free(struct AbnModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` valid for one write.
 */
enum AbnStatus abn_model_system(const struct AbnModel *model, enum AbnSystem *out);

/**
 * Number of 40 ms frames (and so of predictions) for `samples` audio
 * samples; `samples` must be a multiple of 640.
 */
size_t abn_frames_for_samples(size_t samples);

/**
 * Predicts one recording. `m_hat` receives the mean-weight prediction and
 * `s_hat` (may be null) the uncertainty estimate, `capacity` values each.
 * Systems without an uncertainty output fill `s_hat` with NaN. `passes`
 * is the number of stochastic passes (at least 2 for Bayesian systems).
 *
 * # Safety
 * `waveform` must be valid for `samples` reads, `m_hat` and a non-null
 * `s_hat` for `capacity` writes, and `frames` for one write.
 */
enum AbnStatus abn_predict(const struct AbnModel *model,
                           const float *waveform,
                           size_t samples,
                           size_t passes,
                           uint64_t seed,
                           double *m_hat,
                           double *s_hat,
                           size_t capacity,
                           size_t *frames);

/**
 * Concordance correlation coefficient of two length-`n` series.
 *
 * # Safety
 * `x` and `y` must be valid for `n` reads, `out` for one write.
 */
enum AbnStatus abn_ccc(const double *x, const double *y, size_t n, double *out);

/**
 * KL(N(mu_p, sigma_p^2) || N(mu_q, sigma_q^2)).
 *
 * # Safety
 * `out` must be valid for one write.
 */
enum AbnStatus abn_gaussian_kl(double mu_p,
                               double sigma_p,
                               double mu_q,
                               double sigma_q,
                               double *out);

/**
 * Mean per-frame KL from the label distribution `(m, s)` to the
 * prediction `(m_hat, s_hat)`, with both spreads floored.
 *
 * # Safety
 * The four inputs must be valid for `n` reads, `out` for one write.
 */
enum AbnStatus abn_kl_metric(const double *m,
                             const double *s,
                             const double *m_hat,
                             const double *s_hat,
                             size_t n,
                             double *out);

/**
 * Centered running median, window truncated at the edges; `out` receives `n`
 * values and may not alias `seq`.
 *
 * # Safety
 * `seq` must be valid for `n` reads and `out` for `n` writes.
 */
enum AbnStatus abn_median_filter(const double *seq, size_t n, size_t window, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFFECT_BNN_H */
