#ifndef CONFROUTE_H
#define CONFROUTE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CrStatus {
  CR_OK = 0,
  CR_ERR_NULL_POINTER = 1,
  CR_ERR_INVALID_UTF8 = 2,
  CR_ERR_INVALID_ARGUMENT = 3,
  CR_ERR_IO = 4,
  CR_ERR_PARSE = 5,
  CR_ERR_MODEL = 6,
  CR_ERR_NETWORK = 7,
  CR_ERR_PANIC = 8,
} CrStatus;

typedef enum CrRoute {
  CR_ROUTE_LOCAL = 0,
  CR_ROUTE_REMOTE = 1,
} CrRoute;

/**
 * Which calibration metric [`cr_calibration`] computes.
 */
typedef enum CrMetric {
  CR_METRIC_ECE = 0,
  CR_METRIC_BRIER = 1,
  CR_METRIC_CE = 2,
} CrMetric;

/**
 * Loaded dataset.
 */
typedef struct CrDataset CrDataset;

/**
 * Running gateway with its own async runtime.
 */
typedef struct CrGateway CrGateway;

/**
 * Loaded model checkpoint.
 */
typedef struct CrModel CrModel;

/**
 * One greedy prediction. `answer` is owned by the library; release the
 * whole struct with [`cr_prediction_free`].
 */
typedef struct CrPrediction {
  char *answer;
  double p_un;
  double p_cn;
  /**
   * `P(<CN>) / (P(<UN>) + P(<CN>))`, or -1 when the model has no confidence tokens.
   */
  double confidence;
  uint32_t token_count;
} CrPrediction;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next failing call on the same thread; do not free.
 */
const char *cr_last_error(void);

/**
 * Release a string returned by the library.
 *
 * # Safety
 * `s` must be null or a pointer obtained from this library, freed once.
 */
void cr_string_free(char *s);

/**
 * Confidence-token score `p_cn / (p_un + p_cn)`.
 *
 * # Safety
 * `out` must be null or valid for writes.
 */
enum CrStatus cr_self_ref_score(double p_un, double p_cn, double *out);

/**
 * Remote iff `confidence < threshold`.
 */
enum CrRoute cr_route(double confidence, double threshold);

/**
 * ECE (with `n_bins` bins), Brier score, or cross-entropy (clamped at the
 * default epsilon) of `scores` against 0/1 `correct`.
 *
 * # Safety
 * `scores` and `correct` must hold `n` elements; `out` must be valid for writes.
 */
enum CrStatus cr_calibration(enum CrMetric metric,
                             const double *scores,
                             const uint8_t *correct,
                             size_t n,
                             size_t n_bins,
                             double *out);

/**
 * Rejection AUC of `confidence` (rejection score `1 - c`) against
 * `is_reject` labels.
 *
 * # Safety
 * Arrays must hold `n` elements; `out` must be valid for writes.
 */
enum CrStatus cr_rejection_auc(const double *confidence,
                               const uint8_t *is_reject,
                               size_t n,
                               double *out);

/**
 * Load a checkpoint written by `confroute train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CrStatus cr_model_load(const char *path, struct CrModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`cr_model_load`], freed once.
 */
void cr_model_free(struct CrModel *model);

/**
 * Greedy prediction for an already-rendered prompt.
 *
 * # Safety
 * `model` must be a live handle, `prompt` a NUL-terminated string and
 * `out` valid for writes.
 */
enum CrStatus cr_model_predict(const struct CrModel *model,
                               const char *prompt,
                               uint32_t max_new_tokens,
                               struct CrPrediction *out);

/**
 * Release the answer string inside `p` and reset it.
 *
 * # Safety
 * `p` must be null or point to a prediction filled by [`cr_model_predict`].
 */
void cr_prediction_free(struct CrPrediction *p);

/**
 * Load and validate a JSONL dataset.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CrStatus cr_dataset_load(const char *path, struct CrDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle.
 */
size_t cr_dataset_len(const struct CrDataset *dataset);

/**
 * Rendered prompt of record `index`; free with [`cr_string_free`].
 *
 * # Safety
 * `dataset` must be a live handle and `out` valid for writes.
 */
enum CrStatus cr_dataset_prompt(const struct CrDataset *dataset, size_t index, char **out);

/**
 * # Safety
 * `dataset` must be null or a handle from [`cr_dataset_load`], freed once.
 */
void cr_dataset_free(struct CrDataset *dataset);

/**
 * Start a gateway from a JSON config (same schema as the config file).
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be valid for writes.
 */
enum CrStatus cr_gateway_start(const char *config_json, struct CrGateway **out);

/**
 * Bound port of a running gateway, or 0 for a null handle.
 *
 * # Safety
 * `gateway` must be null or a live handle.
 */
uint16_t cr_gateway_port(const struct CrGateway *gateway);

/**
 * Atomically replace the routing threshold. Values above 1 route everything.
 *
 * # Safety
 * `gateway` must be a live handle.
 */
enum CrStatus cr_gateway_set_threshold(const struct CrGateway *gateway, double threshold);

/**
 * Counter snapshot as JSON; free with [`cr_string_free`].
 *
 * # Safety
 * `gateway` must be a live handle and `out` valid for writes.
 */
enum CrStatus cr_gateway_metrics_json(const struct CrGateway *gateway, char **out);

/**
 * Shut the gateway down gracefully and release the handle.
 *
 * # Safety
 * `gateway` must be null or a handle from [`cr_gateway_start`], freed once.
 */
void cr_gateway_stop(struct CrGateway *gateway);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CONFROUTE_H */
