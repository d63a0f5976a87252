#ifndef WXCT_H
#define WXCT_H

/* Generated by cbindgen from the wxct-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible function in this library.
 *
 * The non-zero values mirror the process exit codes of the `wxct` CLI so
 * that host applications can map failures uniformly across both entry
 * points.
 */
typedef enum WxctStatus {
  /**
   * The call succeeded; out-parameters are valid.
   */
  WXCT_STATUS_OK = 0,
  /**
   * An internal error that fits no more specific category.
   */
  WXCT_STATUS_ERROR = 1,
  /**
   * A configuration problem (malformed checkpoint metadata, bad model
   * hyperparameters).
   */
  WXCT_STATUS_CONFIG = 2,
  /**
   * A data problem (unreadable file, undecodable image, vocabulary
   * mismatch).
   */
  WXCT_STATUS_DATA = 3,
  /**
   * A numerical failure (non-finite values in the forward pass).
   */
  WXCT_STATUS_NUMERICAL = 4,
  /**
   * The caller passed a NULL pointer, a non-UTF-8 string, or an
   * out-of-range dimension.
   */
  WXCT_STATUS_INVALID_ARGUMENT = 5,
  /**
   * An internal panic was caught at the boundary; the handle should be
   * considered poisoned and freed.
   */
  WXCT_STATUS_PANIC = 6,
} WxctStatus;

/**
 * Opaque handle to a loaded recognizer: model weights, architecture
 * configuration, and label vocabulary.
 */
typedef struct WxctModel WxctModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the library version as a static NUL-terminated string.
 */
const char *wxct_version(void);

/**
 * Returns the message recorded by the most recent failing call on this
 * thread, or an empty string if none failed yet.
 *
 * The pointer stays valid until the next failing call on the same thread;
 * do not free it.
 */
const char *wxct_last_error_message(void);

/**
 * Loads a model checkpoint from `path` and stores the new handle in
 * `out`.
 *
 * On failure `*out` is untouched and the status describes the problem:
 * `WXCT_STATUS_DATA` for unreadable files, `WXCT_STATUS_CONFIG` for
 * checkpoints whose metadata does not describe a loadable model.
 *
 * # Safety
 * `path` must be NULL or a NUL-terminated UTF-8 string; `out` must be NULL
 * or point to writable storage for one pointer. (NULL for either is
 * reported as `WXCT_STATUS_INVALID_ARGUMENT` rather than dereferenced.)
 */
enum WxctStatus wxct_model_load(const char *path, struct WxctModel **out);

/**
 * Releases a handle created by [`wxct_model_load`]. Passing NULL is a
 * no-op.
 *
 * # Safety
 * `model` must be NULL or a pointer previously returned through
 * `wxct_model_load` that has not yet been freed.
 */
void wxct_model_free(struct WxctModel *model);

/**
 * Returns the number of labels the model predicts, or 0 when `model` is
 * NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle from [`wxct_model_load`].
 */
size_t wxct_model_label_count(const struct WxctModel *model);

/**
 * Returns the square input resolution (pixels per side) the model resizes
 * images to, or 0 when `model` is NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle from [`wxct_model_load`].
 */
size_t wxct_model_input_size(const struct WxctModel *model);

/**
 * Returns the name of label `index` as a NUL-terminated string borrowed
 * from the handle, or NULL when `model` is NULL or `index` is out of
 * range. The pointer stays valid until the handle is freed.
 *
 * # Safety
 * `model` must be NULL or a live handle from [`wxct_model_load`].
 */
const char *wxct_model_label_name(const struct WxctModel *model, size_t index);

/**
 * Runs inference on an interleaved 8-bit RGB image (row-major, 3 bytes per
 * pixel) and writes one probability in `[0, 1]` per label.
 *
 * The image may be any size; it is resized to the model's input
 * resolution. The call is deterministic: the same pixels produce the same
 * probabilities.
 *
 * # Safety
 * `model` must be a live handle from [`wxct_model_load`]. `pixels` must
 * point to `width * height * 3` readable bytes and `probabilities` to
 * [`wxct_model_label_count`] writable doubles. NULL pointers are reported
 * as `WXCT_STATUS_INVALID_ARGUMENT`; buffer lengths cannot be checked and
 * must be guaranteed by the caller.
 */
enum WxctStatus wxct_predict_rgb8(struct WxctModel *model,
                                  const uint8_t *pixels,
                                  size_t width,
                                  size_t height,
                                  double *probabilities);

/**
 * Runs inference on a PNG file and writes one probability in `[0, 1]` per
 * label. Equivalent to decoding the file and calling
 * [`wxct_predict_rgb8`].
 *
 * # Safety
 * `model` must be a live handle from [`wxct_model_load`]. `path` must be
 * NULL or a NUL-terminated UTF-8 string; `probabilities` must point to
 * [`wxct_model_label_count`] writable doubles.
 */
enum WxctStatus wxct_predict_png(struct WxctModel *model, const char *path, double *probabilities);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WXCT_H */
