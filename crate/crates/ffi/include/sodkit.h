#ifndef SODKIT_H
#define SODKIT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define SODKIT_OK 0

/**
 * A required pointer was null or a string was not UTF-8.
 */
#define SODKIT_ERR_ARGUMENT 1

/**
 * The input violated a documented precondition.
 */
#define SODKIT_ERR_VALIDATION 2

#define SODKIT_ERR_NOT_FOUND 3

#define SODKIT_ERR_IO 4

/**
 * All ratings fell in one category; kappa is undefined.
 */
#define SODKIT_ERR_DEGENERATE 5

/**
 * An output buffer is too small.
 */
#define SODKIT_ERR_BUFFER 6

#define SODKIT_ERR_INTERNAL 7

#define SODKIT_LEVEL_NONE 0

#define SODKIT_LEVEL_SLIGHT 1

#define SODKIT_LEVEL_FAIR 2

#define SODKIT_LEVEL_MODERATE 3

#define SODKIT_LEVEL_SUBSTANTIAL 4

#define SODKIT_LEVEL_ALMOST_PERFECT 5

/**
 * A loaded classifier.
 */
typedef struct SodkitModel SodkitModel;

/**
 * An interrater study session opened from a data directory.
 */
typedef struct SodkitSession SodkitSession;

typedef struct SodkitKappa {
  double kappa;
  double se;
  double z;
  double p_value;
  double ci_low;
  double ci_high;
  /**
   * One of the `SODKIT_LEVEL_*` constants.
   */
  int32_t level;
  size_t items;
  size_t raters;
  double observed_agreement;
  double expected_agreement;
} SodkitKappa;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null.
 */
const char *sodkit_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sodkit_version(void);

/**
 * Fleiss' kappa for a row-major `items x categories` count matrix.
 *
 * # Safety
 * `counts` must point to `items * categories` values and `out` must be valid.
 */
int32_t sodkit_fleiss_kappa(const uint32_t *counts,
                            size_t items,
                            size_t categories,
                            struct SodkitKappa *out);

/**
 * Landis–Koch level of `kappa` as a `SODKIT_LEVEL_*` constant.
 *
 * # Safety
 * `out_level` must be valid.
 */
int32_t sodkit_interpret_kappa(double kappa, int32_t *out_level);

/**
 * Human-readable name of a level constant, or null for unknown codes.
 */
const char *sodkit_level_name(int32_t level);

/**
 * Macro-averaged F1 from per-class precision and recall arrays of length `n`.
 *
 * # Safety
 * `precision` and `recall` must point to `n` values; `out` must be valid.
 */
int32_t sodkit_macro_f1(const double *precision, const double *recall, size_t n, double *out);

/**
 * Numerically stable softmax of `n` logits into `out` (also length `n`).
 *
 * # Safety
 * `logits` and `out` must each point to `n` values.
 */
int32_t sodkit_softmax(const double *logits, size_t n, double *out);

/**
 * Loads a model directory written by `sodkit train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be valid.
 */
int32_t sodkit_model_load(const char *dir, struct SodkitModel **out);

/**
 * # Safety
 * `model` must come from `sodkit_model_load` and not be used afterwards.
 */
void sodkit_model_free(struct SodkitModel *model);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sodkit_model_num_classes(const struct SodkitModel *model);

/**
 * Label of class `index`, owned by the handle; null if out of range.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
const char *sodkit_model_class_label(const struct SodkitModel *model, size_t index);

/**
 * Classifies an encoded PNG or JPEG image held in memory.
 *
 * # Safety
 * `data` must point to `len` bytes, `probabilities` to `probabilities_len`
 * writable values, and `out_index` must be valid.
 */
int32_t sodkit_model_predict_bytes(const struct SodkitModel *model,
                                   const uint8_t *data,
                                   size_t len,
                                   double *probabilities,
                                   size_t probabilities_len,
                                   size_t *out_index);

/**
 * Classifies an image file.
 *
 * # Safety
 * As for `sodkit_model_predict_bytes`, with `path` a NUL-terminated string.
 */
int32_t sodkit_model_predict_file(const struct SodkitModel *model,
                                  const char *path,
                                  double *probabilities,
                                  size_t probabilities_len,
                                  size_t *out_index);

/**
 * Opens `data_dir/sessions/<session_id>` and replays its label log.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be valid.
 */
int32_t sodkit_session_open(const char *data_dir,
                            const char *session_id,
                            struct SodkitSession **out);

/**
 * # Safety
 * `session` must come from `sodkit_session_open` and not be used afterwards.
 */
void sodkit_session_free(struct SodkitSession *session);

/**
 * Number of labels recorded so far, or 0 for a null handle.
 *
 * # Safety
 * `session` must be null or a live handle.
 */
size_t sodkit_session_label_count(const struct SodkitSession *session);

/**
 * Records and persists one label under the batch protocol.
 *
 * # Safety
 * `session` must be a live handle; strings must be NUL-terminated.
 */
int32_t sodkit_session_record_label(struct SodkitSession *session,
                                    const char *rater,
                                    const char *image_id,
                                    const char *method,
                                    const char *label);

/**
 * Fleiss' kappa over `n_raters` raters of a session for one method.
 *
 * # Safety
 * `raters` must point to `n_raters` NUL-terminated strings; `out` must be valid.
 */
int32_t sodkit_session_agreement(const struct SodkitSession *session,
                                 const char *const *raters,
                                 size_t n_raters,
                                 const char *method,
                                 struct SodkitKappa *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SODKIT_H */
