#ifndef SCED_H
#define SCED_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ScedObjective {
  SCED_OBJECTIVE_PL1 = 1,
  SCED_OBJECTIVE_PL2 = 2,
} ScedObjective;

typedef enum ScedStatus {
  SCED_STATUS_OK = 0,
  SCED_STATUS_NULL_POINTER = -1,
  SCED_STATUS_INVALID_ARGUMENT = -2,
  SCED_STATUS_DATA = -3,
  SCED_STATUS_NUMERICAL = -4,
  SCED_STATUS_BUFFER_TOO_SMALL = -5,
  SCED_STATUS_PANIC = -6,
} ScedStatus;

typedef enum ScedGenerator {
  SCED_GENERATOR_M1 = 1,
  SCED_GENERATOR_M2 = 2,
} ScedGenerator;

// Opaque numeric dataset.
typedef struct ScedDataset ScedDataset;

// Opaque fit result.
typedef struct ScedFit ScedFit;

// Fit settings. Start from `sced_fit_options_default`.
typedef struct ScedFitOptions {
  // Inclusive cluster-count range; equal bounds fit a single k.
  size_t k_min;
  size_t k_max;
  uint64_t seed;
  enum ScedObjective objective;
  double d0;
  size_t lambda_grid_size;
  size_t optimizer_evals_per_dim;
} ScedFitOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static nul-terminated string.
const char *sced_version(void);

// Message of the last failed call on this thread; valid until the next call
// that fails.
const char *sced_last_error_message(void);

struct ScedFitOptions sced_fit_options_default(void);

// Copy an n×p row-major buffer into a new dataset.
//
// # Safety
// `values` must point to n·p doubles; `out` must be writable.
enum ScedStatus sced_dataset_new(const double *values,
                                 size_t n,
                                 size_t p,
                                 struct ScedDataset **out);

// Column-standardized copy of a dataset.
//
// # Safety
// `data` must be a live dataset handle; `out` must be writable.
enum ScedStatus sced_dataset_standardize(const struct ScedDataset *data, struct ScedDataset **out);

// # Safety
// `data` must be a live dataset handle or null.
size_t sced_dataset_n(const struct ScedDataset *data);

// # Safety
// `data` must be a live dataset handle or null.
size_t sced_dataset_p(const struct ScedDataset *data);

// # Safety
// `data` must be a live dataset handle or null; it is invalid afterwards.
void sced_dataset_free(struct ScedDataset *data);

// Draw n points from a simulation design. When `labels_out` is not null it
// receives the n one-based true labels.
//
// # Safety
// `out` must be writable; `labels_out` must be null or hold n entries.
enum ScedStatus sced_simulate(enum ScedGenerator generator,
                              size_t p,
                              size_t k,
                              size_t n,
                              double sigma,
                              uint64_t seed,
                              struct ScedDataset **out,
                              size_t *labels_out);

// Fit one k, or select k by SPIC when `k_min < k_max`.
//
// # Safety
// `data` must be a live dataset handle; `options` and `out` must be valid.
enum ScedStatus sced_fit(const struct ScedDataset *data,
                         const struct ScedFitOptions *options,
                         struct ScedFit **out);

// # Safety
// `fit` must be a live fit handle or null; it is invalid afterwards.
void sced_fit_free(struct ScedFit *fit);

// Number of clusters in the reported fit; 0 for a null handle.
//
// # Safety
// `fit` must be a live fit handle or null.
size_t sced_fit_k(const struct ScedFit *fit);

// # Safety
// `fit` must be a live fit handle or null.
size_t sced_fit_n(const struct ScedFit *fit);

// # Safety
// `fit` must be a live fit handle or null.
size_t sced_fit_p(const struct ScedFit *fit);

// One-based final labels into a buffer of at least n entries.
//
// # Safety
// `out` must hold `len` entries.
enum ScedStatus sced_fit_labels(const struct ScedFit *fit, size_t *out, size_t len);

// Final cluster means, k×p.
//
// # Safety
// `out` must hold `len` doubles.
enum ScedStatus sced_fit_means(const struct ScedFit *fit, double *out, size_t len);

// Final variance matrix Σₓ, p×p.
//
// # Safety
// `out` must hold `len` doubles.
enum ScedStatus sced_fit_variance(const struct ScedFit *fit, double *out, size_t len);

// Final mixing proportions, k entries.
//
// # Safety
// `out` must hold `len` doubles.
enum ScedStatus sced_fit_probs(const struct ScedFit *fit, double *out, size_t len);

// Posterior cluster probabilities, n×k.
//
// # Safety
// `out` must hold `len` doubles.
enum ScedStatus sced_fit_posteriors(const struct ScedFit *fit, double *out, size_t len);

// Leave-one-out marginal log-likelihood of the final fit.
//
// # Safety
// `out` must be writable.
enum ScedStatus sced_fit_loo_loglik(const struct ScedFit *fit, double *out);

// Full fit report, with the SPIC curve when k was selected, as a JSON
// string to be released with `sced_string_free`.
//
// # Safety
// `out` must be writable.
enum ScedStatus sced_fit_report_json(const struct ScedFit *fit, char **out);

// # Safety
// `s` must come from this library or be null.
void sced_string_free(char *s);

// Rand index of two labelings of n points. Labels are arbitrary
// non-negative integers.
//
// # Safety
// `a` and `b` must hold n entries; `out` must be writable.
enum ScedStatus sced_rand_index(const size_t *a, const size_t *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCED_H */
