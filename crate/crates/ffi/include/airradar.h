#ifndef AIRRADAR_H
#define AIRRADAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ArdrStatus {
  ARDR_STATUS_OK = 0,
  ARDR_STATUS_NULL_POINTER = 1,
  ARDR_STATUS_INVALID_ARGUMENT = 2,
  ARDR_STATUS_CONFIG = 3,
  ARDR_STATUS_IO = 4,
  ARDR_STATUS_PARSE = 5,
  ARDR_STATUS_FORMAT = 6,
  ARDR_STATUS_DIMENSION = 7,
  ARDR_STATUS_NUMERIC = 8,
  ARDR_STATUS_VALIDATION = 9,
  ARDR_STATUS_PANIC = 10,
} ArdrStatus;

/**
 * Station readings over time.
 */
typedef struct ArdrDataset ArdrDataset;

/**
 * A trained or loaded model.
 */
typedef struct ArdrModel ArdrModel;

/**
 * Pollutant error summary in raw units; `mape` is a fraction.
 */
typedef struct ArdrMetrics {
  double mae;
  double rmse;
  double mape;
} ArdrMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *ardr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ardr_version(void);

/**
 * Loads `stations.csv` and `readings.csv` from directory `dir`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum ArdrStatus ardr_dataset_load(const char *dir, struct ArdrDataset **out);

/**
 * Generates a synthetic dataset from a TOML document (must set `seed`).
 *
 * # Safety
 * `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum ArdrStatus ardr_dataset_synthetic(const char *config_toml, struct ArdrDataset **out);

/**
 * Number of stations; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t ardr_dataset_stations(const struct ArdrDataset *ds);

/**
 * Number of snapshots; 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live dataset handle.
 */
size_t ardr_dataset_snapshots(const struct ArdrDataset *ds);

/**
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void ardr_dataset_free(struct ArdrDataset *ds);

/**
 * Trains a model on `ds`. `config_toml` may be null for defaults.
 *
 * # Safety
 * `ds` must be a live dataset handle, `config_toml` null or NUL-terminated,
 * `out` writable.
 */
enum ArdrStatus ardr_model_train(const struct ArdrDataset *ds,
                                 const char *config_toml,
                                 struct ArdrModel **out);

/**
 * # Safety
 * `path` must be NUL-terminated; `out` writable.
 */
enum ArdrStatus ardr_model_load(const char *path, struct ArdrModel **out);

/**
 * # Safety
 * `model` must be a live handle; `path` NUL-terminated.
 */
enum ArdrStatus ardr_model_save(const struct ArdrModel *model, const char *path);

/**
 * Number of stations the model is bound to; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t ardr_model_stations(const struct ArdrModel *model);

/**
 * Reconstructs the pollutant at every station for snapshot `time`, treating
 * stations with `mask[i] != 0` as unobserved. Writes `n` raw-unit values.
 *
 * # Safety
 * `mask` and `out_values` must each hold `n` elements.
 */
enum ArdrStatus ardr_model_infer(const struct ArdrModel *model,
                                 const struct ArdrDataset *ds,
                                 size_t time,
                                 const uint8_t *mask,
                                 size_t n,
                                 double *out_values);

/**
 * Scores the model on the test split at one mask ratio. When
 * `baseline_knn`/`baseline_idw` are non-null they receive KNN (k = 5) and
 * IDW (p = 2) scores on the same masks.
 *
 * # Safety
 * Handles must be live; every non-null output pointer must be writable.
 */
enum ArdrStatus ardr_model_evaluate(const struct ArdrModel *model,
                                    const struct ArdrDataset *ds,
                                    double ratio,
                                    uint64_t seed,
                                    struct ArdrMetrics *out,
                                    struct ArdrMetrics *baseline_knn,
                                    struct ArdrMetrics *baseline_idw);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void ardr_model_free(struct ArdrModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIRRADAR_H */
