#ifndef BMN_H
#define BMN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BmnStatus {
  BMN_STATUS_OK = 0,
  BMN_STATUS_NULL_POINTER = 1,
  BMN_STATUS_INVALID_ARGUMENT = 2,
  BMN_STATUS_IO = 3,
  BMN_STATUS_FORMAT = 4,
  BMN_STATUS_SHAPE = 5,
  BMN_STATUS_NUMERIC = 6,
  BMN_STATUS_PANIC = 7,
} BmnStatus;

typedef struct BmnDataset BmnDataset;

// Loaded checkpoint: parameters plus target configuration.
typedef struct BmnModel BmnModel;

// Result of one verification.
typedef struct BmnVerification {
  // 1 for matching, 0 for non-matching.
  int32_t matching;
  double margin;
} BmnVerification;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null. Valid until the next call
// into this library from the same thread.
const char *bmn_last_error_message(void);

// Loads a checkpoint file into a new model handle.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BmnStatus bmn_model_load(const char *path, struct BmnModel **out);

// # Safety
// `model` must come from [`bmn_model_load`] and not be freed twice. Null is ignored.
void bmn_model_free(struct BmnModel *model);

// Writes the number of input features per item.
//
// # Safety
// Pointers must be valid.
enum BmnStatus bmn_model_input_dim(const struct BmnModel *model, size_t *out);

// Writes the latent dimensionality.
//
// # Safety
// Pointers must be valid.
enum BmnStatus bmn_model_latent_dim(const struct BmnModel *model, size_t *out);

// Single-orientation latent point of a vector-modality pair.
//
// # Safety
// `x1`, `x2` must hold `len` values; `z` must hold `z_len` values.
enum BmnStatus bmn_latent(const struct BmnModel *model,
                          const double *x1,
                          const double *x2,
                          size_t len,
                          double *z,
                          size_t z_len);

// Flip-aggregated verification of a vector-modality pair. `z_bar` may be
// null; otherwise it receives `z_bar_len` (= latent dim) values.
//
// # Safety
// `x1`, `x2` must hold `len` values and `out` must be valid.
enum BmnStatus bmn_verify(const struct BmnModel *model,
                          const double *x1,
                          const double *x2,
                          size_t len,
                          struct BmnVerification *out,
                          double *z_bar,
                          size_t z_bar_len);

// Loads a dataset file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BmnStatus bmn_dataset_load(const char *path, struct BmnDataset **out);

// # Safety
// `dataset` must come from [`bmn_dataset_load`] and not be freed twice. Null is ignored.
void bmn_dataset_free(struct BmnDataset *dataset);

// # Safety
// Pointers must be valid.
enum BmnStatus bmn_dataset_len(const struct BmnDataset *dataset, size_t *out);

// Verifies dataset items `a` and `b`, flipping per the dataset's modality.
//
// # Safety
// Handles and `out` must be valid; `z_bar` as in [`bmn_verify`].
enum BmnStatus bmn_verify_items(const struct BmnModel *model,
                                const struct BmnDataset *dataset,
                                size_t a,
                                size_t b,
                                struct BmnVerification *out,
                                double *z_bar,
                                size_t z_bar_len);

// Diagonal-covariance KL of a row-major `rows x cols` batch against
// `N(mu 1, sigma^2 I)`.
//
// # Safety
// `z` must hold `rows * cols` values and `out` must be valid.
enum BmnStatus bmn_kl_batch(const double *z,
                            size_t rows,
                            size_t cols,
                            double mu,
                            double sigma,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BMN_H */
