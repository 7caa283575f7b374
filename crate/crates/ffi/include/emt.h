#ifndef EMT_H
#define EMT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define EMT_SHARE_MPU 1

#define EMT_SHARE_MODALITY 2

#define EMT_SHARE_LAYER 4

typedef enum EmtStatus {
  EMT_STATUS_OK = 0,
  EMT_STATUS_NULL_POINTER = 1,
  EMT_STATUS_INVALID_ARGUMENT = 2,
  EMT_STATUS_CONFIG = 3,
  EMT_STATUS_SHAPE = 4,
  EMT_STATUS_IO = 5,
  EMT_STATUS_CHECKPOINT = 6,
  EMT_STATUS_NON_FINITE = 7,
  EMT_STATUS_PANIC = 8,
  EMT_STATUS_OTHER = 9,
} EmtStatus;

typedef enum EmtStrategy {
  EMT_STRATEGY_OOLL = 0,
  EMT_STRATEGY_OALL = 1,
  EMT_STRATEGY_OAGL = 2,
} EmtStrategy;

/**
 * Opaque trained model.
 */
typedef struct EmtModel EmtModel;

/**
 * Fusion shape used by the counting functions.
 */
typedef struct EmtFusionShape {
  enum EmtStrategy strategy;
  size_t d;
  size_t layers;
  size_t heads;
  size_t expansion;
  /**
   * Bitwise OR of the `EMT_SHARE_*` flags.
   */
  uint32_t share_flags;
} EmtFusionShape;

typedef struct EmtMetrics {
  double mae;
  double corr;
  /**
   * NaN when the labels are not on the [-3, 3] scale.
   */
  double acc7;
  double acc5;
  double acc3;
  double acc2_nonneg;
  double acc2_pos;
  double f1_nonneg;
  double f1_pos;
  /**
   * 1 when either series is constant and `corr` was reported as 0.
   */
  int32_t corr_degenerate;
} EmtMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *emt_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *emt_version(void);

/**
 * Fusion-module MACs of one forward pass over `n` modalities.
 *
 * # Safety
 * `shape` and `out` must be valid pointers; `lengths` must hold `n` values.
 */
enum EmtStatus emt_count_macs(const struct EmtFusionShape *shape,
                              const size_t *lengths,
                              size_t n,
                              uint64_t *out);

/**
 * Distinct trainable scalars of the fusion module; `mpu_out` may be NULL.
 *
 * # Safety
 * `shape` and `total_out` must be valid pointers.
 */
enum EmtStatus emt_param_count(const struct EmtFusionShape *shape,
                               size_t modalities,
                               size_t *total_out,
                               size_t *mpu_out);

/**
 * Trapezoidal area under a metric-vs-missing-rate curve.
 *
 * # Safety
 * `rates` and `values` must hold `n` values; `out` must be valid.
 */
enum EmtStatus emt_auilc(const double *rates, const double *values, size_t n, double *out);

/**
 * Regression and classification metrics on the [-3, 3] label scale.
 *
 * # Safety
 * `preds` and `labels` must hold `n` values; `out` must be valid.
 */
enum EmtStatus emt_evaluate(const double *preds,
                            const double *labels,
                            size_t n,
                            struct EmtMetrics *out);

/**
 * Loads a checkpoint written by `emt train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum EmtStatus emt_model_load(const char *path, struct EmtModel **out);

/**
 * Releases a model; NULL is ignored.
 *
 * # Safety
 * `model` must come from [`emt_model_load`] and not be used afterwards.
 */
void emt_model_free(struct EmtModel *model);

/**
 * Sequence lengths and feature widths the model expects.
 *
 * # Safety
 * `model` must be a live handle; each out pointer may be NULL.
 */
enum EmtStatus emt_model_dims(const struct EmtModel *model,
                              size_t *t_l,
                              size_t *t_a,
                              size_t *t_v,
                              size_t *f_a,
                              size_t *f_v);

/**
 * Total trainable scalars of the loaded model.
 *
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum EmtStatus emt_model_param_count(const struct EmtModel *model, size_t *out);

/**
 * Sentiment score of one utterance. `audio` is `t_a × f_a` and `vision`
 * `t_v × f_v`, row-major; lengths must match [`emt_model_dims`].
 *
 * # Safety
 * Buffers must hold the stated number of elements; `out` must be valid.
 */
enum EmtStatus emt_model_predict(const struct EmtModel *model,
                                 const uint32_t *tokens,
                                 size_t t_l,
                                 const double *audio,
                                 size_t t_a,
                                 const double *vision,
                                 size_t t_v,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMT_H */
