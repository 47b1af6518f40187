#ifndef WSD_H
#define WSD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum WsdStatus {
  WSD_STATUS_OK = 0,
  WSD_STATUS_NULL_POINTER = 1,
  WSD_STATUS_INVALID_ARGUMENT = 2,
  WSD_STATUS_PARSE = 3,
  WSD_STATUS_IO = 4,
  WSD_STATUS_FORMAT = 5,
  WSD_STATUS_DIMENSION_MISMATCH = 6,
  WSD_STATUS_BUFFER_TOO_SMALL = 7,
  WSD_STATUS_PANIC = 8,
} WsdStatus;

/**
 * Opaque slide bag.
 */
typedef struct WsdBag WsdBag;

/**
 * Opaque trained model.
 */
typedef struct WsdModel WsdModel;

/**
 * A Gleason score; `primary == secondary == 0` encodes benign.
 */
typedef struct WsdScore {
  uint8_t primary;
  uint8_t secondary;
} WsdScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *wsd_last_error_message(void);

/**
 * Parses `"3+4"` or `"benign"`.
 *
 * # Safety
 * `text` must be a NUL-terminated string and `out` writable.
 */
enum WsdStatus wsd_parse_score(const char *text, struct WsdScore *out);

/**
 * Writes the consensus level (0, 1 or 2) of an expert/non-expert pair.
 *
 * # Safety
 * `out` must be writable.
 */
enum WsdStatus wsd_consensus(struct WsdScore expert, struct WsdScore nonexpert, uint32_t *out);

/**
 * Writes the slide class index (0 benign .. 3 Gleason 5) of a score.
 *
 * # Safety
 * `out` must be writable.
 */
enum WsdStatus wsd_class_of(struct WsdScore score, uint32_t *out);

/**
 * Regression target of a consensus level on the default scale.
 *
 * # Safety
 * `out` must be writable.
 */
enum WsdStatus wsd_difficulty(uint32_t level, double *out);

/**
 * Classification loss weight of a consensus level under `(w_nc, w_hec, w_hoc)`.
 *
 * # Safety
 * `out` must be writable.
 */
enum WsdStatus wsd_loss_weight(uint32_t level,
                               double w_nc,
                               double w_hec,
                               double w_hoc,
                               bool allow_out_of_range,
                               double *out);

/**
 * Reads a `.wsdb` bag file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum WsdStatus wsd_bag_read(const char *path, struct WsdBag **out);

/**
 * # Safety
 * `bag` must be NULL or a handle from [`wsd_bag_read`] not yet freed.
 */
void wsd_bag_free(struct WsdBag *bag);

/**
 * Number of instances, or 0 for NULL.
 *
 * # Safety
 * `bag` must be NULL or a live handle.
 */
size_t wsd_bag_instances(const struct WsdBag *bag);

/**
 * Feature dimension, or 0 for NULL.
 *
 * # Safety
 * `bag` must be NULL or a live handle.
 */
size_t wsd_bag_dim(const struct WsdBag *bag);

/**
 * Copies the row-major `n x d` features into `buf` of `len` doubles.
 *
 * # Safety
 * `bag` must be a live handle and `buf` valid for `len` writes.
 */
enum WsdStatus wsd_bag_features(const struct WsdBag *bag, double *buf, size_t len);

/**
 * Loads a JSON checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum WsdStatus wsd_model_load(const char *path, struct WsdModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`wsd_model_load`] not yet freed.
 */
void wsd_model_free(struct WsdModel *model);

/**
 * Runs the model on a bag. Writes four class logits to `logits` and the
 * argmax class index to `predicted`; either may be NULL.
 *
 * # Safety
 * Handles must be live; non-NULL outputs must be writable (`logits` for 4 doubles).
 */
enum WsdStatus wsd_model_forward(const struct WsdModel *model,
                                 const struct WsdBag *bag,
                                 double *logits,
                                 uint32_t *predicted);

/**
 * Copies the raw per-instance attention (length `n`) into `buf`.
 *
 * # Safety
 * Handles must be live and `buf` valid for `len` writes.
 */
enum WsdStatus wsd_model_attention(const struct WsdModel *model,
                                   const struct WsdBag *bag,
                                   double *buf,
                                   size_t len);

/**
 * Balanced accuracy of `n` class indices.
 *
 * # Safety
 * Arrays must hold `n` values and `out` be writable.
 */
enum WsdStatus wsd_balanced_accuracy(const uint32_t *truth,
                                     const uint32_t *predicted,
                                     size_t n,
                                     double *out);

/**
 * Support-weighted F1 of `n` class indices.
 *
 * # Safety
 * Arrays must hold `n` values and `out` be writable.
 */
enum WsdStatus wsd_weighted_f1(const uint32_t *truth,
                               const uint32_t *predicted,
                               size_t n,
                               double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WSD_H */
