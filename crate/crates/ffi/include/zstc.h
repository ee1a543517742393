#ifndef ZSTC_H
#define ZSTC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Formalization selector for [`zstc_predict`].
 */
typedef enum ZstcFormalization {
  ZSTC_FORMALIZATION_BINARY = 0,
  ZSTC_FORMALIZATION_DUAL = 1,
  ZSTC_FORMALIZATION_GENERATIVE = 2,
  ZSTC_FORMALIZATION_SEQ_CLS = 3,
} ZstcFormalization;

/**
 * Result code of every call.
 */
typedef enum ZstcStatus {
  ZSTC_STATUS_OK = 0,
  ZSTC_STATUS_NULL_POINTER = 1,
  ZSTC_STATUS_INVALID_UTF8 = 2,
  ZSTC_STATUS_INVALID_ARGUMENT = 3,
  ZSTC_STATUS_IO = 4,
  ZSTC_STATUS_MODE_MISMATCH = 5,
  ZSTC_STATUS_NOT_FOUND = 6,
  ZSTC_STATUS_INTERNAL = 7,
  ZSTC_STATUS_PANIC = 8,
} ZstcStatus;

/**
 * Opaque model handle.
 */
typedef struct ZstcModel ZstcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *zstc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *zstc_version(void);

/**
 * Loads a checkpoint directory into a new handle written to `*out`.
 *
 * # Safety
 * `checkpoint_dir` is a NUL-terminated path; `out` is writable.
 */
enum ZstcStatus zstc_model_load(const char *checkpoint_dir, struct ZstcModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` is NULL or a handle from [`zstc_model_load`] not yet freed.
 */
void zstc_model_free(struct ZstcModel *model);

/**
 * Probability that `label` fits `text` under the binary formalization.
 * `aspect` may be NULL.
 *
 * # Safety
 * Pointers are valid NUL-terminated strings (or NULL where allowed);
 * `out` is writable.
 */
enum ZstcStatus zstc_binary_score(const struct ZstcModel *model,
                                  const char *text,
                                  const char *label,
                                  const char *aspect,
                                  double *out);

/**
 * Cosine similarity of the text and label encodings. `aspect` may be NULL.
 *
 * # Safety
 * As [`zstc_binary_score`].
 */
enum ZstcStatus zstc_dual_score(const struct ZstcModel *model,
                                const char *text,
                                const char *label,
                                const char *aspect,
                                double *out);

/**
 * Picks one of `n_candidates` labels for `text` and writes its index.
 * `formalization` is a [`ZstcFormalization`] value; `aspect` may be NULL.
 *
 * # Safety
 * `candidates` points to `n_candidates` NUL-terminated strings; `out_index`
 * is writable.
 */
enum ZstcStatus zstc_predict(const struct ZstcModel *model,
                             uint32_t formalization,
                             const char *text,
                             const char *const *candidates,
                             size_t n_candidates,
                             const char *aspect,
                             size_t *out_index);

/**
 * Share (0 to 100) of the out-of-domain label tokens seen among the
 * in-domain labels.
 *
 * # Safety
 * Each list points to the given number of NUL-terminated strings; `out` is
 * writable.
 */
enum ZstcStatus zstc_label_overlap(const char *const *in_labels,
                                   size_t n_in,
                                   const char *const *out_labels,
                                   size_t n_out,
                                   double *out);

/**
 * Whether `prediction` matches any of the `n_gold` gold labels.
 *
 * # Safety
 * `gold` points to `n_gold` NUL-terminated strings; `out` is writable.
 */
enum ZstcStatus zstc_is_correct(const char *prediction,
                                const char *const *gold,
                                size_t n_gold,
                                bool *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ZSTC_H */
