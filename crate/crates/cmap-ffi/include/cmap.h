/* C interface to the consistency-purification laboratory.
 *
 * Conventions:
 *  - Handles are opaque pointers created through `out` parameters and
 *    released by the matching *_free, which ignores NULL. Every other
 *    function rejects NULL with CMAP_STATUS_NULL_ARGUMENT.
 *  - Fallible calls return a CmapStatus; on anything but CMAP_STATUS_OK,
 *    cmap_last_error() describes the failure. The message is thread-local
 *    and valid until the next laboratory call on the same thread.
 *  - Configuration is passed as UTF-8 JSON in the library's schemas; "{}"
 *    selects defaults, unknown keys are rejected.
 *  - Samples are row-major double buffers with an explicit shape; the
 *    caller allocates, and prod(shape) values are read or written.
 *  - Randomness is keyed by the explicit seed (plus a per-sample lane for
 *    the defense); equal keys reproduce results bit for bit.
 */

#ifndef CMAP_H
#define CMAP_H

/* Generated from src/lib.rs by the generate-header build feature; edit there. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Outcome of a call. Everything except `Ok` leaves a message behind;
 * retrieve it with cmap_last_error().
 */
typedef enum {
  CMAP_STATUS_OK = 0,
  /**
   * A required pointer was null.
   */
  CMAP_STATUS_NULL_ARGUMENT = 1,
  /**
   * Malformed JSON, bad shapes or sizes, out-of-range indices.
   */
  CMAP_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The filesystem failed underneath a save or load.
   */
  CMAP_STATUS_IO = 3,
  /**
   * The computation produced non-finite values or diverged.
   */
  CMAP_STATUS_NUMERIC = 4,
  /**
   * A defect: a panic was caught at the boundary.
   */
  CMAP_STATUS_INTERNAL = 5,
} CmapStatus;

/**
 * An input-standardizing MLP classifier.
 */
typedef struct CmapClassifier CmapClassifier;

/**
 * A labeled sample collection.
 */
typedef struct CmapDataset CmapDataset;

/**
 * A consistency generator (trained network or analytic Gaussian map).
 */
typedef struct CmapModel CmapModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the laboratory, as a static NUL-terminated string.
 */
const char *cmap_version(void);

/**
 * Message for the most recent failure on this thread; empty after a
 * successful call. Valid until the next laboratory call on the thread.
 */
const char *cmap_last_error(void);

/**
 * Generates a Gaussian-mixture dataset from a `GaussianSpec` JSON document.
 */
CmapStatus cmap_dataset_gen_gaussian(const char *spec_json, CmapDataset **out);

/**
 * Generates the synthetic shape-image dataset from a `ShapeImageSpec`
 * JSON document.
 */
CmapStatus cmap_dataset_gen_shapes(const char *spec_json, CmapDataset **out);

/**
 * Archives a dataset into a directory (IDX samples plus JSON metadata).
 */
CmapStatus cmap_dataset_save(const CmapDataset *ds, const char *dir);

/**
 * Loads a dataset archived by [`cmap_dataset_save`].
 */
CmapStatus cmap_dataset_load(const char *dir, CmapDataset **out);

/**
 * Number of samples.
 */
CmapStatus cmap_dataset_len(const CmapDataset *ds, size_t *out);

/**
 * Flattened length of one sample.
 */
CmapStatus cmap_dataset_sample_dim(const CmapDataset *ds, size_t *out);

/**
 * Number of label classes.
 */
CmapStatus cmap_dataset_class_count(const CmapDataset *ds, size_t *out);

/**
 * Writes the per-sample shape into `shape_out` (up to `capacity` entries)
 * and its dimension count into `ndim_out`. Fails if `capacity` is too
 * small, reporting the required count in the message.
 */
CmapStatus cmap_dataset_sample_shape(const CmapDataset *ds,
                                     size_t *shape_out,
                                     size_t capacity,
                                     size_t *ndim_out);

/**
 * Copies sample `index` (row-major, flattened) into `buf` and its label
 * into `label_out`. `buf_len` must equal the sample dimension.
 */
CmapStatus cmap_dataset_sample(const CmapDataset *ds,
                               size_t index,
                               double *buf,
                               size_t buf_len,
                               size_t *label_out);

/**
 * Releases a dataset. Null is ignored.
 */
void cmap_dataset_free(CmapDataset *ds);

/**
 * Trains a consistency generator on the dataset's samples. `config_json`
 * is a `CmTrainConfig` document; the seed keys the training stream.
 */
CmapStatus cmap_model_train(const char *config_json,
                            const CmapDataset *ds,
                            uint64_t seed,
                            CmapModel **out);

/**
 * Builds the closed-form generator for an isotropic Gaussian with center
 * `mu` (length `dim`) and scale `sigma_x`. `schedule_json` is a
 * `NoiseSchedule` document.
 */
CmapStatus cmap_model_analytic(const char *schedule_json,
                               const double *mu,
                               size_t dim,
                               double sigma_x,
                               CmapModel **out);

/**
 * Saves a generator snapshot to a JSON file.
 */
CmapStatus cmap_model_save(const CmapModel *m, const char *path);

/**
 * Loads a generator snapshot saved by [`cmap_model_save`].
 */
CmapStatus cmap_model_load(const char *path, CmapModel **out);

/**
 * One-step generation from a latent at the top noise scale. `z` and
 * `out_buf` both hold `prod(shape)` values.
 */
CmapStatus cmap_model_generate(const CmapModel *m,
                               const double *z,
                               const size_t *shape,
                               size_t ndim,
                               double *out_buf);

/**
 * Releases a generator. Null is ignored.
 */
void cmap_model_free(CmapModel *m);

/**
 * Trains the MLP classifier on a dataset. `config_json` is a
 * `ClfTrainConfig` document; the seed keys the training stream.
 */
CmapStatus cmap_classifier_train(const char *config_json,
                                 const CmapDataset *ds,
                                 uint64_t seed,
                                 CmapClassifier **out);

/**
 * Saves a classifier snapshot to a JSON file.
 */
CmapStatus cmap_classifier_save(const CmapClassifier *c, const char *path);

/**
 * Loads a classifier snapshot saved by [`cmap_classifier_save`].
 */
CmapStatus cmap_classifier_load(const char *path, CmapClassifier **out);

/**
 * Number of classes the classifier separates.
 */
CmapStatus cmap_classifier_class_count(const CmapClassifier *c, size_t *out);

/**
 * Predicted label for one shaped sample.
 */
CmapStatus cmap_classifier_predict(const CmapClassifier *c,
                                   const double *x,
                                   const size_t *shape,
                                   size_t ndim,
                                   size_t *label_out);

/**
 * Releases a classifier. Null is ignored.
 */
void cmap_classifier_free(CmapClassifier *c);

/**
 * Runs projected gradient descent against the classifier from sample `x`
 * with true label `label`. `config_json` is a `PgdConfig` document;
 * `adv_out` receives `prod(shape)` values. Deterministic.
 */
CmapStatus cmap_attack_classifier(const CmapClassifier *c,
                                  const char *config_json,
                                  const double *x,
                                  const size_t *shape,
                                  size_t ndim,
                                  size_t label,
                                  double *adv_out);

/**
 * Purifies one shaped sample through the generator and votes the
 * classifier over the restored population. `config_json` is a
 * `PurifyConfig` document. The `(seed, lane)` pair keys the defense
 * randomness: equal keys reproduce the vote bit for bit, distinct lanes
 * decorrelate samples.
 */
CmapStatus cmap_purify_predict(const CmapModel *m,
                               const CmapClassifier *c,
                               const char *config_json,
                               const double *x,
                               const size_t *shape,
                               size_t ndim,
                               uint64_t seed,
                               uint64_t lane,
                               size_t *label_out);

/**
 * Monte-Carlo check of the restoration-gap statistics against their
 * closed forms. `config_json` is a `TheoremConfig` document; `pass_out`
 * receives whether every gate held.
 */
CmapStatus cmap_check_restoration_statistics(const char *config_json, bool *pass_out);

/**
 * Checks the reconstruction bound on randomized instances. `config_json`
 * is a `BoundConfig` document; `pass_out` receives whether no instance
 * violated the bound.
 */
CmapStatus cmap_check_reconstruction_bound(const char *config_json, bool *pass_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMAP_H */
