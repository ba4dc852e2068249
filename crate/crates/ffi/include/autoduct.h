#ifndef AUTODUCT_H
#define AUTODUCT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum AdStatus {
  AD_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  AD_STATUS_NULL_POINTER = 1,
  /**
   * An argument is out of range or not valid UTF-8.
   */
  AD_STATUS_INVALID_ARGUMENT = 2,
  /**
   * File system failure.
   */
  AD_STATUS_IO = 3,
  /**
   * Malformed or inconsistent data.
   */
  AD_STATUS_DATA = 4,
  /**
   * Training, prediction or model artifact failure.
   */
  AD_STATUS_MODEL = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  AD_STATUS_PANIC = 6,
} AdStatus;

/**
 * Opaque dataset handle.
 */
typedef struct AdDataset AdDataset;

/**
 * Opaque trained-ensemble handle.
 */
typedef struct AdEnsemble AdEnsemble;

/**
 * Architecture and optimizer settings shared by every member trained through
 * [`ad_ensemble_train`]. Obtain defaults with [`ad_train_options_default`].
 */
typedef struct AdTrainOptions {
  size_t members;
  size_t hidden_layers;
  size_t hidden_units;
  /**
   * 0 ReLU, 1 LeakyReLU, 2 GELU, 3 SELU, 4 ELU, 5 Softplus.
   */
  uint32_t activation;
  double dropout_rate;
  double learning_rate;
  double weight_decay;
  size_t batch_size;
  size_t epochs;
  size_t patience;
  /**
   * Member `i` trains with seed `seed + i`.
   */
  uint64_t seed;
  /**
   * Seed of the 72/18/10 train/validation/test split.
   */
  uint64_t split_seed;
} AdTrainOptions;

/**
 * Accuracy metrics of a prediction against targets.
 */
typedef struct AdMetrics {
  size_t n;
  double rmse;
  double mape_pct;
  double rmspe_pct;
  double ratio_mean;
  double ratio_std;
  double ratio_inside_frac;
} AdMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ad_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated) and
 * returns its length without the terminator; 0 when there is no error. A message
 * longer than `len - 1` bytes is truncated.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ad_last_error(char *buf, size_t len);

/**
 * Synthetic heteroscedastic dataset of `n` rows.
 *
 * # Safety
 * `out` must be a valid pointer; on success it receives a handle to free with
 * [`ad_dataset_free`].
 */
enum AdStatus ad_dataset_generate(size_t n,
                                  uint64_t seed,
                                  double noise_scale,
                                  struct AdDataset **out);

/**
 * Loads a CSV with header `D,L,P,G,X,CHF`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdStatus ad_dataset_load_csv(const char *path, struct AdDataset **out);

/**
 * Builds a dataset from row-major inputs (`n` rows of D, L, P, G, X) and optional targets.
 *
 * # Safety
 * `inputs` must point to `5 * n` doubles; `targets` must be null or point to `n` doubles.
 */
enum AdStatus ad_dataset_from_arrays(const double *inputs,
                                     const double *targets,
                                     size_t n,
                                     struct AdDataset **out);

/**
 * Writes the dataset as CSV.
 *
 * # Safety
 * `ds` must be a live handle and `path` a NUL-terminated string.
 */
enum AdStatus ad_dataset_write_csv(const struct AdDataset *ds, const char *path);

/**
 * Number of rows; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t ad_dataset_len(const struct AdDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void ad_dataset_free(struct AdDataset *ds);

/**
 * Defaults: 5 members of 6 x 32 GELU, dropout 0.05, learning rate 2e-3, weight decay
 * 1e-4, batch 128, 300 epochs with patience 30, seed 0.
 */
struct AdTrainOptions ad_train_options_default(void);

/**
 * Splits `ds`, fits the normalizer on the training part and trains the ensemble.
 *
 * # Safety
 * `ds` must be a live handle, `opts` null (defaults) or valid, and `out` a valid pointer.
 */
enum AdStatus ad_ensemble_train(const struct AdDataset *ds,
                                const struct AdTrainOptions *opts,
                                struct AdEnsemble **out);

/**
 * Loads an ensemble directory written by [`ad_ensemble_save`] or the command-line tool.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AdStatus ad_ensemble_load(const char *dir, struct AdEnsemble **out);

/**
 * # Safety
 * `ens` must be a live handle and `dir` a NUL-terminated string.
 */
enum AdStatus ad_ensemble_save(const struct AdEnsemble *ens, const char *dir);

/**
 * Number of members; 0 for a null handle.
 *
 * # Safety
 * `ens` must be null or a live handle.
 */
size_t ad_ensemble_len(const struct AdEnsemble *ens);

/**
 * Predicts `n` rows of row-major inputs. Each output array receives `n` values; any of
 * them may be null to skip it. `total_var = aleatory_var + epistemic_var`.
 *
 * # Safety
 * `inputs` must point to `5 * n` doubles and each non-null output to `n` writable doubles.
 */
enum AdStatus ad_ensemble_predict(const struct AdEnsemble *ens,
                                  const double *inputs,
                                  size_t n,
                                  double *mean,
                                  double *aleatory_var,
                                  double *epistemic_var);

/**
 * Predicts every row of `ds` and scores the predictions against its targets.
 *
 * # Safety
 * `ens` and `ds` must be live handles and `out` a valid pointer.
 */
enum AdStatus ad_ensemble_evaluate(const struct AdEnsemble *ens,
                                   const struct AdDataset *ds,
                                   struct AdMetrics *out);

/**
 * Scores `n` predictions against targets.
 *
 * # Safety
 * `y` and `yhat` must point to `n` doubles and `out` must be valid.
 */
enum AdStatus ad_metrics(const double *y, const double *yhat, size_t n, struct AdMetrics *out);

/**
 * # Safety
 * `ens` must be null or a handle not yet freed.
 */
void ad_ensemble_free(struct AdEnsemble *ens);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AUTODUCT_H */
