#ifndef SPHPR_H
#define SPHPR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SphprStatus {
  SPHPR_STATUS_OK = 0,
  SPHPR_STATUS_INVALID_ARGUMENT = 1,
  SPHPR_STATUS_DATA_ERROR = 2,
  SPHPR_STATUS_NUMERICAL_ERROR = 3,
  SPHPR_STATUS_NULL_POINTER = 4,
  SPHPR_STATUS_PANIC = 5,
} SphprStatus;

typedef enum SphprFamily {
  SPHPR_FAMILY_VON_MISES_FISHER = 0,
  SPHPR_FAMILY_SCHLADITZ = 1,
} SphprFamily;

/**
 * Modes and labels from mode-based clustering.
 */
typedef struct SphprClustering SphprClustering;

/**
 * Observations on S².
 */
typedef struct SphprDataset SphprDataset;

/**
 * A finite mixture fitted by EM.
 */
typedef struct SphprEmFit SphprEmFit;

/**
 * A PR mixing-density estimate.
 */
typedef struct SphprEstimate SphprEstimate;

/**
 * Options for [`sphpr_estimate`]. Obtain defaults from
 * [`sphpr_estimate_options_default`].
 */
typedef struct SphprEstimateOptions {
  size_t grid_theta;
  size_t grid_phi;
  double gamma;
  size_t n_perms;
  uint64_t seed;
  double lambda_min;
  double lambda_max;
  double lambda_tol;
  size_t opt_budget;
  /**
   * Fixed λ; NaN searches [lambda_min, lambda_max].
   */
  double lambda;
} SphprEstimateOptions;

typedef struct SphprGofResult {
  double log10_bf;
  double lambda_hat_h0;
  double lambda_hat_h1;
  /**
   * 1 when the single kernel is favoured, 0 otherwise.
   */
  int32_t favors_h0;
  /**
   * 1 when either λ̂ lies on the search boundary.
   */
  int32_t boundary;
} SphprGofResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on this thread.
 */
const char *sphpr_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sphpr_version(void);

/**
 * Builds a dataset from `n` Cartesian triples, normalizing each.
 *
 * # Safety
 * `xyz` must point to `3 * n` doubles; `out` must be writable.
 */
enum SphprStatus sphpr_dataset_from_xyz(const double *xyz, size_t n, struct SphprDataset **out);

/**
 * Reads a dataset from a CSV file (x1,x2,x3 or theta,phi rows).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SphprStatus sphpr_dataset_from_csv(const char *path, struct SphprDataset **out);

/**
 * Number of observations, or 0 for NULL.
 *
 * # Safety
 * `ds` must be NULL or a live dataset handle.
 */
size_t sphpr_dataset_len(const struct SphprDataset *ds);

/**
 * # Safety
 * `ds` must be NULL or a handle not yet freed.
 */
void sphpr_dataset_free(struct SphprDataset *ds);

struct SphprEstimateOptions sphpr_estimate_options_default(enum SphprFamily family);

/**
 * Estimates λ by PR marginal likelihood (unless fixed) and the mixing
 * density at λ.
 *
 * # Safety
 * `ds` must be a live dataset; `options` NULL or valid; `out` writable.
 */
enum SphprStatus sphpr_estimate(const struct SphprDataset *ds,
                                enum SphprFamily family,
                                const struct SphprEstimateOptions *options,
                                struct SphprEstimate **out);

/**
 * # Safety
 * `est` must be a live estimate handle.
 */
double sphpr_estimate_lambda(const struct SphprEstimate *est);

/**
 * # Safety
 * `est` must be a live estimate handle.
 */
double sphpr_estimate_log_marginal(const struct SphprEstimate *est);

/**
 * Number of support-grid nodes, or 0 for NULL.
 *
 * # Safety
 * `est` must be NULL or a live estimate handle.
 */
size_t sphpr_estimate_len(const struct SphprEstimate *est);

/**
 * Copies node θ, φ and ψ̂ values (θ-major) into caller buffers of length
 * `len`, which must equal [`sphpr_estimate_len`]. Any buffer may be NULL.
 *
 * # Safety
 * Non-NULL buffers must hold `len` doubles.
 */
enum SphprStatus sphpr_estimate_grid(const struct SphprEstimate *est,
                                     double *theta,
                                     double *phi,
                                     double *psi,
                                     size_t len);

/**
 * Mixture density f̂(y) at `n` Cartesian points.
 *
 * # Safety
 * `xyz` must hold `3 * n` doubles and `out` `n` doubles.
 */
enum SphprStatus sphpr_estimate_density(const struct SphprEstimate *est,
                                        const double *xyz,
                                        size_t n,
                                        double *out);

/**
 * # Safety
 * `est` must be NULL or a handle not yet freed.
 */
void sphpr_estimate_free(struct SphprEstimate *est);

/**
 * Fits `components` kernels by EM, or selects J ≤ `j_max` by BIC over
 * `restarts` seeded starts when `components` is 0.
 *
 * # Safety
 * `ds` must be a live dataset; `out` writable.
 */
enum SphprStatus sphpr_fit_em(const struct SphprDataset *ds,
                              enum SphprFamily family,
                              size_t components,
                              size_t j_max,
                              size_t restarts,
                              uint64_t seed,
                              struct SphprEmFit **out);

/**
 * # Safety
 * `fit` must be NULL or a live EM handle.
 */
size_t sphpr_em_components(const struct SphprEmFit *fit);

/**
 * # Safety
 * `fit` must be a live EM handle.
 */
double sphpr_em_lambda(const struct SphprEmFit *fit);

/**
 * # Safety
 * `fit` must be a live EM handle.
 */
double sphpr_em_log_lik(const struct SphprEmFit *fit);

/**
 * # Safety
 * `fit` must be a live EM handle.
 */
double sphpr_em_bic(const struct SphprEmFit *fit);

/**
 * Weight and mean direction of component `k`.
 *
 * # Safety
 * `weight` must be writable and `mu` hold 3 doubles.
 */
enum SphprStatus sphpr_em_component(const struct SphprEmFit *fit,
                                    size_t k,
                                    double *weight,
                                    double *mu);

/**
 * # Safety
 * `fit` must be NULL or a handle not yet freed.
 */
void sphpr_em_free(struct SphprEmFit *fit);

/**
 * Bayes factor of a single kernel against a PR mixture of it, with a
 * Gamma(`prior_shape`, `prior_scale`) prior on λ.
 *
 * # Safety
 * `ds` must be a live dataset; `out` writable.
 */
enum SphprStatus sphpr_bayes_factor(const struct SphprDataset *ds,
                                    enum SphprFamily family,
                                    double prior_shape,
                                    double prior_scale,
                                    uint64_t seed,
                                    struct SphprGofResult *out);

/**
 * Clusters observations by the modes of the PR estimate. `options` may be
 * NULL for defaults; `rel_threshold` ≤ 0 and `lambda_subsample` = 0 also
 * select defaults.
 *
 * # Safety
 * `ds` must be a live dataset; `options` NULL or valid; `out` writable.
 */
enum SphprStatus sphpr_cluster(const struct SphprDataset *ds,
                               enum SphprFamily family,
                               const struct SphprEstimateOptions *options,
                               size_t lambda_subsample,
                               double rel_threshold,
                               struct SphprClustering **out);

/**
 * # Safety
 * `c` must be NULL or a live clustering handle.
 */
size_t sphpr_clustering_modes(const struct SphprClustering *c);

/**
 * # Safety
 * `c` must be NULL or a live clustering handle.
 */
double sphpr_clustering_lambda(const struct SphprClustering *c);

/**
 * Location and attributed mass of mode `k`.
 *
 * # Safety
 * `mass` must be writable and `mu` hold 3 doubles.
 */
enum SphprStatus sphpr_clustering_mode(const struct SphprClustering *c,
                                       size_t k,
                                       double *mass,
                                       double *mu);

/**
 * Copies one label per observation into `labels` (length `len`).
 *
 * # Safety
 * `labels` must hold `len` elements.
 */
enum SphprStatus sphpr_clustering_labels(const struct SphprClustering *c,
                                         size_t *labels,
                                         size_t len);

/**
 * # Safety
 * `c` must be NULL or a handle not yet freed.
 */
void sphpr_clustering_free(struct SphprClustering *c);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SPHPR_H */
