#ifndef MIXDEFENSE_H
#define MIXDEFENSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  MD_STATUS_OK = 0,
  MD_STATUS_NULL_POINTER = 1,
  MD_STATUS_INVALID_ARGUMENT = 2,
  MD_STATUS_IO = 3,
  MD_STATUS_FORMAT = 4,
  MD_STATUS_SHAPE = 5,
  MD_STATUS_INVALID_CLASS = 6,
  MD_STATUS_NON_FINITE = 7,
  MD_STATUS_CHECKPOINT = 8,
  MD_STATUS_CALIBRATION = 9,
  MD_STATUS_PANIC = 10,
} MdStatus;

typedef enum {
  MD_DECISION_ACCEPTED = 0,
  MD_DECISION_REJECTED_LP = 1,
  MD_DECISION_REJECTED_SP = 2,
} MdDecision;

typedef struct MdClassifier MdClassifier;

typedef struct MdPipeline MdPipeline;

typedef struct MdSaec MdSaec;

/**
 * Verdict of the defended pipeline. `predicted_label`, `sp_flagged` and
 * `sp_distance` are meaningful only when `has_prediction` is non-zero
 * (inputs rejected by the first layer are never classified).
 */
typedef struct {
  uint8_t lp_flagged;
  double lp_score;
  uint8_t has_prediction;
  uint32_t predicted_label;
  uint8_t sp_flagged;
  double sp_distance;
  MdDecision decision;
  /**
   * Accepted label; equals `predicted_label` when accepted.
   */
  uint32_t label;
} MdVerdict;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *md_version(void);

/**
 * Message of the last failed call on this thread (empty after a success).
 * Valid until the next call on the same thread.
 */
const char *md_last_error(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
MdStatus md_classifier_load(const char *path, MdClassifier **out);

/**
 * # Safety
 * `h` must come from [`md_classifier_load`] and not be used afterwards.
 */
void md_classifier_free(MdClassifier *h);

/**
 * Number of classes, or 0 for a null handle.
 *
 * # Safety
 * `h` must be null or a live handle.
 */
size_t md_classifier_classes(const MdClassifier *h);

/**
 * Writes `classes` logits to `logits`.
 *
 * # Safety
 * `pixels` must hold `height * width * channels` floats and `logits`
 * `logits_len` floats.
 */
MdStatus md_classifier_logits(const MdClassifier *h,
                              const float *pixels,
                              size_t height,
                              size_t width,
                              size_t channels,
                              float *logits,
                              size_t logits_len);

/**
 * # Safety
 * As [`md_classifier_logits`]; `label` must be valid.
 */
MdStatus md_classifier_predict(const MdClassifier *h,
                               const float *pixels,
                               size_t height,
                               size_t width,
                               size_t channels,
                               uint32_t *label);

/**
 * Loads a calibrated detector saved as JSON.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
MdStatus md_saec_load(const char *path, MdSaec **out);

/**
 * # Safety
 * `h` must come from [`md_saec_load`] and not be used afterwards.
 */
void md_saec_free(MdSaec *h);

/**
 * # Safety
 * `pixels` must hold `height * width * channels` floats; `score` and
 * `flagged` must be valid.
 */
MdStatus md_saec_detect(const MdSaec *h,
                        const float *pixels,
                        size_t height,
                        size_t width,
                        size_t channels,
                        double *score,
                        uint8_t *flagged);

/**
 * Loads the four trained components of the defended classifier.
 *
 * # Safety
 * All paths must be NUL-terminated strings and `out` a valid pointer.
 */
MdStatus md_pipeline_load(const char *classifier_path,
                          const char *cgan_path,
                          const char *saec_path,
                          const char *sp_path,
                          MdPipeline **out);

/**
 * # Safety
 * `h` must come from [`md_pipeline_load`] and not be used afterwards.
 */
void md_pipeline_free(MdPipeline *h);

/**
 * Classifies one image through both detection layers.
 *
 * # Safety
 * `pixels` must hold `height * width * channels` floats and `verdict` be
 * valid. The handle may be shared across threads.
 */
MdStatus md_pipeline_classify(const MdPipeline *h,
                              const float *pixels,
                              size_t height,
                              size_t width,
                              size_t channels,
                              MdVerdict *verdict);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXDEFENSE_H */
