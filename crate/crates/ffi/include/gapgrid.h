#ifndef GAPGRID_H
#define GAPGRID_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GgStatus {
  GG_STATUS_OK = 0,
  GG_STATUS_NULL_POINTER = 1,
  GG_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed input, invalid annotations or an undecodable grid.
   */
  GG_STATUS_DATA = 3,
  /**
   * Shape mismatch or non-finite values.
   */
  GG_STATUS_NUMERIC = 4,
  GG_STATUS_IO = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  GG_STATUS_PANIC = 6,
} GgStatus;

/**
 * A loaded checkpoint.
 */
typedef struct GgModel GgModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * owned by the library and valid until the next call.
 */
const char *gg_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void gg_string_free(char *s);

/**
 * Loads a checkpoint file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum GgStatus gg_model_load(const char *path, struct GgModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`gg_model_load`] and not have been freed.
 */
void gg_model_free(struct GgModel *model);

/**
 * Runs the model on a JSONL corpus (entities are ignored) and writes the
 * predicted corpus as JSONL to `*out`. Sentences whose grids exceed the
 * decoder's path cap come back without entities.
 *
 * # Safety
 * `model` must be live; `corpus_jsonl` NUL-terminated; `out` writable.
 */
enum GgStatus gg_model_predict(const struct GgModel *model, const char *corpus_jsonl, char **out);

/**
 * Encodes one annotated example (a single JSONL record) into its grid TSV.
 * Entity types are taken from the example itself.
 *
 * # Safety
 * `example_json` must be NUL-terminated; `out` writable.
 */
enum GgStatus gg_encode_example(const char *example_json, char **out);

/**
 * Decodes a grid TSV over `n` tokens into a JSON array of
 * `{"type": ..., "spans": [[start, end], ...]}`.
 *
 * # Safety
 * `tsv` must be NUL-terminated; `out` writable.
 */
enum GgStatus gg_decode_grid_tsv(const char *tsv, uintptr_t n, char **out);

/**
 * Span-level exact-match precision, recall and F1 of two JSONL corpora
 * aligned by sentence id.
 *
 * # Safety
 * Both strings must be NUL-terminated; the three outputs writable.
 */
enum GgStatus gg_span_f1(const char *pred_jsonl,
                         const char *gold_jsonl,
                         double *precision,
                         double *recall,
                         double *f1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GAPGRID_H */
