#ifndef ENCBRIDGE_H
#define ENCBRIDGE_H

/* Generated by cbindgen from the encbridge-ffi crate. Do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code returned by every fallible FFI call.
 */
typedef enum EncbridgeStatus {
  /**
   * The call succeeded.
   */
  ENCBRIDGE_STATUS_OK = 0,
  /**
   * A required pointer argument was NULL.
   */
  ENCBRIDGE_STATUS_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  ENCBRIDGE_STATUS_INVALID_UTF8 = 2,
  /**
   * The checkpoint could not be read or parsed.
   */
  ENCBRIDGE_STATUS_LOAD_FAILED = 3,
  /**
   * The forward pass failed during decoding.
   */
  ENCBRIDGE_STATUS_DECODE_FAILED = 4,
  /**
   * The caller-provided output buffer is too small; the required size was
   * written to the length out-parameter.
   */
  ENCBRIDGE_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * An internal invariant was violated (a panic was caught at the
   * boundary).
   */
  ENCBRIDGE_STATUS_INTERNAL = 6,
} EncbridgeStatus;

/**
 * A loaded model: configuration, weights, and vocabulary. Opaque to C.
 */
typedef struct EncbridgeModel EncbridgeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Never NULL.
 */
const char *encbridge_version(void);

/**
 * Copy the message describing the most recent failure on this thread into
 * `buf`. Returns the size the message needs, including the NUL terminator;
 * the message is truncated if `cap` is smaller. An empty message (required
 * size 1) means no error has been recorded.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be NULL (in which case only
 * the required size is returned).
 */
size_t encbridge_last_error_message(char *buf, size_t cap);

/**
 * Load a model from a checkpoint file written by the `encbridge` trainer.
 * On success writes a handle through `out_model`; the caller owns it and must
 * release it with [`encbridge_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` a valid pointer.
 */
enum EncbridgeStatus encbridge_model_load(const char *path, struct EncbridgeModel **out_model);

/**
 * Release a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must be a handle returned by [`encbridge_model_load`] that has not
 * already been freed.
 */
void encbridge_model_free(struct EncbridgeModel *model);

/**
 * Number of entries in the model's vocabulary, including the four reserved
 * tokens. Returns 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle from [`encbridge_model_load`].
 */
size_t encbridge_model_vocab_size(const struct EncbridgeModel *model);

/**
 * Model width (`d_model`). Returns 0 for a NULL handle.
 *
 * # Safety
 * `model` must be NULL or a live handle from [`encbridge_model_load`].
 */
size_t encbridge_model_d_model(const struct EncbridgeModel *model);

/**
 * Translate one whitespace-tokenized source sentence with greedy decoding.
 *
 * `input` is tokenized on whitespace; tokens outside the vocabulary map to
 * the unknown token. `max_len` caps the number of emitted tokens; pass 0 for
 * the model's context limit. The translation is written into `out_buf` as a
 * NUL-terminated, space-separated string, and the capacity it requires
 * (including the NUL) is written through `out_needed` when non-NULL. If
 * `out_cap` is too small the call returns `BufferTooSmall` and the caller can
 * retry with `*out_needed` bytes.
 *
 * # Safety
 * `model` must be a live handle, `input` a NUL-terminated string, and
 * `out_buf` must point to `out_cap` writable bytes (or be NULL to only query
 * the required size).
 */
enum EncbridgeStatus encbridge_model_translate(const struct EncbridgeModel *model,
                                               const char *input,
                                               size_t max_len,
                                               char *out_buf,
                                               size_t out_cap,
                                               size_t *out_needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENCBRIDGE_H */
